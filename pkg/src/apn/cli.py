"""Command line entry point: ``apn <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Failures print one line ``apn: error[<kind>]: <reason>`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import platform
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import BundleError, EpisodeError, SynthesisError, generate_synthetic, load_bundle, save_bundle
from .evaluation import (EvalConfig, calibrate_gamma, evaluate_fsl, evaluate_gzsl, evaluate_zsl, export_heatmaps,
                         gfsl_eval, localize, object_box, pcp)
from .model import embed, load_checkpoint, save_checkpoint
from .training import ConfigError, DivergenceError, TrainConfig, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "model.apnckpt"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p, *, data=True, out=True, seed=True):
    if data:
        p.add_argument("--data", required=True, help="dataset bundle directory")
    if out:
        p.add_argument("--out", required=True, help="output directory")
    if seed:
        p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="apn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"apn {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="render a synthetic bundle")
    _add_common(g, data=False)
    g.add_argument("--n-classes", type=int, default=25)
    g.add_argument("--n-unseen", type=int, default=5)
    g.add_argument("--n-val", type=int, default=0)
    g.add_argument("--k-attrs", type=int, default=12)
    g.add_argument("--l-groups", type=int, default=4)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--imgs-per-class", type=int, default=200)

    t = sub.add_parser("train", help="train a model")
    _add_common(t)
    t.add_argument("--config", help="key = value training config file")
    t.add_argument("--epochs", type=int, default=None)
    for flag in ("reg", "ad", "cpt", "zoom"):
        t.add_argument(f"--no-{flag}", action="store_true", help=f"disable the {flag} term")
    t.add_argument("--f64", action="store_true", help="64-bit parameters and arithmetic")

    e = sub.add_parser("eval", help="ZSL / GZSL / FSL / GFSL evaluation")
    _add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=("zsl", "gzsl", "fsl", "gfsl"), default="zsl")
    e.add_argument("--gamma", type=float, default=None, help="calibration factor; calibrated on val when omitted")
    e.add_argument("--shots", type=int, default=1)
    e.add_argument("--way", type=int, default=5)
    e.add_argument("--query", type=int, default=15)
    e.add_argument("--episodes", type=int, default=600)
    e.add_argument("--no-zoom", action="store_true")

    lo = sub.add_parser("localize", help="export attribute heatmaps")
    _add_common(lo, seed=False)
    lo.add_argument("--checkpoint", required=True)
    lo.add_argument("--images", default="0", help="comma separated sample indices")
    lo.add_argument("--attrs", default=None, help="comma separated attribute indices (default: top per group)")
    lo.add_argument("--rho", type=float, default=0.25)

    pc = sub.add_parser("pcp", help="part localization accuracy")
    _add_common(pc, seed=False)
    pc.add_argument("--checkpoint", required=True)
    pc.add_argument("--rho", type=float, default=0.25)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(gc, data=False, out=False)
    gc.add_argument("--out", default=None)
    gc.add_argument("--trials", type=int, default=100)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _int_list(text: str, what: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{what} expects comma separated integers") from None


def _load_data(path):
    try:
        return load_bundle(path)
    except FileNotFoundError as exc:
        raise DataError(f"{exc.filename}: not found") from exc


def _load_ckpt(path):
    if not Path(path).exists():
        raise DataError(f"{path}: checkpoint not found")
    return load_checkpoint(path)


def bundle_digest(directory) -> str:
    h = hashlib.sha256()
    for name in sorted(p.name for p in Path(directory).iterdir() if p.name != "manifest.txt"):
        h.update(name.encode())
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, args: argparse.Namespace, config_text: str = "") -> None:
    lines = [f"apn_version = {__version__}", f"command = {args.command}",
             f"python = {platform.python_version()}", f"numpy = {np.__version__}"]
    for key, value in sorted(vars(args).items()):
        if key != "command":
            lines.append(f"arg.{key} = {value}")
    if config_text:
        lines += ["", "[config]", config_text.rstrip("\n")]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    kw = dict(n_classes=args.n_classes, n_unseen=args.n_unseen, n_val=args.n_val, k_attrs=args.k_attrs,
              l_groups=args.l_groups, image_size=args.image_size, imgs_per_class=args.imgs_per_class,
              seed=7 if args.seed is None else args.seed)
    bundle = generate_synthetic(**kw)
    save_bundle(bundle, out)
    write_manifest(out, args, "".join(f"{k} = {v}\n" for k, v in kw.items()))
    print(f"bundle {out} digest {bundle_digest(out)}")
    return EXIT_OK


def train_config_from_args(args) -> TrainConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    for flag in ("reg", "ad", "cpt", "zoom"):
        if getattr(args, f"no_{flag}"):
            overrides[flag] = False
    if args.f64:
        overrides["f64"] = True
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"{args.config}: config file not found")
        return load_config(args.config, **overrides)
    return TrainConfig(**overrides)


def cmd_train(args) -> int:
    cfg = train_config_from_args(args)
    bundle = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, runlog = train(bundle, cfg)
    save_checkpoint(out / CHECKPOINT_NAME, params, cfg.to_text())
    (out / "train_log.tsv").write_text(runlog.to_text())
    write_manifest(out, args, cfg.to_text())
    print(f"checkpoint {out / CHECKPOINT_NAME} best_epoch {runlog.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.gamma is not None and args.gamma < 0:
        raise UsageError("--gamma must be non-negative")
    try:
        ecfg = EvalConfig(mode=args.mode, gamma=args.gamma or 0.0, way=args.way, query=args.query,
                          episodes=args.episodes, shots=args.shots, shot=args.shots,
                          seed=7 if args.seed is None else args.seed, zoom=not args.no_zoom)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    bundle = _load_data(args.data)
    params, _ = _load_ckpt(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if ecfg.mode == "zsl":
        rep = evaluate_zsl(bundle, params, ecfg.zoom)
    elif ecfg.mode == "gzsl":
        gamma = args.gamma if args.gamma is not None else calibrate_gamma(bundle, params, zoom=ecfg.zoom)
        rep = evaluate_gzsl(bundle, params, gamma, ecfg.zoom)
    elif ecfg.mode == "fsl":
        rep = evaluate_fsl(bundle, params, ecfg)
    else:
        rep = gfsl_eval(bundle, params, ecfg.shots, ecfg.seed)
    rep.save(out / "report.tsv")
    write_manifest(out, args, "".join(f"{f.name} = {getattr(ecfg, f.name)}\n" for f in dataclasses.fields(ecfg)))
    print(f"{rep.mode} t1={rep.t1:.4f} u={rep.u:.4f} s={rep.s:.4f} h={rep.h:.4f}")
    return EXIT_OK


def cmd_localize(args) -> int:
    if not 0 < args.rho <= 1:
        raise UsageError("--rho must lie in (0, 1]")
    bundle = _load_data(args.data)
    if bundle.images is None:
        raise DataError("localize needs an image bundle")
    params, _ = _load_ckpt(args.checkpoint)
    images = _int_list(args.images, "images")
    if any(not 0 <= i < len(bundle.samples) for i in images):
        raise UsageError(f"--images indices must lie in [0, {len(bundle.samples)})")
    attrs = None if args.attrs is None else _int_list(args.attrs, "attrs")
    if attrs is not None and any(not 0 <= k < bundle.schema.k for k in attrs):
        raise UsageError(f"--attrs indices must lie in [0, {bundle.schema.k})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emb = embed(params, bundle.images[images], bundle.schema.groups, False)
    rows = ["image_id\tattribute\tname\tpeak_row\tpeak_col\tx0\ty0\tx1\ty1"]
    for row, i in enumerate(images):
        sample = bundle.samples[i]
        chosen = attrs
        if chosen is None:
            groups = bundle.schema.groups or [list(range(bundle.schema.k))]
            chosen = [sorted(g)[int(np.argmax(emb.a_hat[row, sorted(g)]))] for g in groups]
        obj = object_box(sample.parts) if sample.parts else None
        export_heatmaps(bundle.images[i], emb.M[row], chosen, out, bundle.schema.names, args.rho, obj,
                        stem=f"img{sample.image_id}")
        for k in chosen:
            _, (r, c), box = localize(emb.M[row], k, bundle.image_size, args.rho, obj)
            rows.append("\t".join(map(str, [sample.image_id, k, bundle.schema.names[k], r, c, *box])))
    (out / "localize.tsv").write_text("\n".join(rows) + "\n")
    write_manifest(out, args)
    print(f"wrote {len(rows) - 1} heatmaps to {out}")
    return EXIT_OK


def cmd_pcp(args) -> int:
    if not 0 < args.rho <= 1:
        raise UsageError("--rho must lie in (0, 1]")
    bundle = _load_data(args.data)
    params, _ = _load_ckpt(args.checkpoint)
    try:
        rep = pcp(bundle, params, rho=args.rho)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.save(out / "report.tsv")
    write_manifest(out, args)
    print(f"mean_pcp={rep.mean_pcp:.4f} " + " ".join(f"{k}={v:.4f}" for k, v in rep.pcp.items()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    if args.trials < 1:
        raise UsageError("--trials must be positive")
    rows = run_suite(args.trials, 0 if args.seed is None else args.seed)
    table = format_table(rows)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(table + "\n")
        write_manifest(out, args)
    bad = [r.name for r in rows if not r.ok]
    if bad:
        raise NumericalError(f"gradient check failed for {','.join(bad)}")
    return EXIT_OK


COMMANDS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "eval": cmd_eval, "localize": cmd_localize,
            "pcp": cmd_pcp, "gradcheck": cmd_gradcheck}


def _fail(kind: str, message: str, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"apn: error[{kind}]: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    if args.command is None:
        return _fail("usage", "missing subcommand; one of " + ", ".join(COMMANDS), EXIT_USAGE)
    if args.threads < 1:
        return _fail("usage", "--threads must be at least 1", EXIT_USAGE)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (DataError, BundleError, SynthesisError, EpisodeError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except (NumericalError, DivergenceError, FloatingPointError) as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except ValueError as exc:
        return _fail("data", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
