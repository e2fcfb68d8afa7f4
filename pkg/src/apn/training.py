"""Optimisation loop, configs, checkpoint selection and grid search."""

from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as apn
from .data import DatasetBundle
from .model import LossBreakdown, ModelParams

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, epoch: int, detail: str):
        self.epoch = epoch
        super().__init__(f"non-finite {detail} in epoch {epoch}")


@dataclass
class TrainConfig:
    lambda1: float = 0.3
    lambda2: float = 0.01
    lambda3: float = 0.2
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay: float = 0.9
    lr_step: int = 10
    epochs: int = 30
    batch_size: int = 32
    seed: int = 7
    reg: bool = True
    ad: bool = True
    cpt: bool = True
    cpt_clamp: bool = True
    zoom: bool = True
    f64: bool = False
    channels: tuple[int, ...] = (16, 32, 64)
    test_fraction: float = 0.2
    debug: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.lr_step < 1:
            raise ConfigError("lr, batch_size and lr_step must be positive and epochs non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        self.channels = tuple(int(c) for c in self.channels)

    @property
    def dtype(self):
        return np.float64 if self.f64 else np.float32

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(",") if v.strip()) if value.strip() else ()
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value {value!r} for key {key!r}") from None


def parse_config_text(text: str, cls=TrainConfig, **overrides):
    """Read ``key = value`` lines (``#`` starts a comment) into ``cls``.

    Unknown keys are rejected.
    """
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(value, getattr(defaults, key), key)
    values.update(overrides)
    return cls(**values)


def load_config(path, cls=TrainConfig, **overrides):
    return parse_config_text(Path(path).read_text(), cls, **overrides)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence, lr: float, beta1: float, beta2: float, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    l_cls: float
    l_reg: float
    l_ad: float
    l_cpt: float
    total: float
    val_t1: float
    lr: float
    seconds: float


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    HEADER = "epoch\tl_cls\tl_reg\tl_ad\tl_cpt\ttotal\tval_t1\tlr\tseconds"

    def to_text(self) -> str:
        rows = [self.HEADER]
        for r in self.records:
            rows.append("\t".join([str(r.epoch)] + [repr(float(v)) for v in (
                r.l_cls, r.l_reg, r.l_ad, r.l_cpt, r.total, r.val_t1, r.lr, r.seconds)]))
        return "\n".join(rows) + "\n"


def balanced_order(class_of: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle within each class, then interleave classes so that every
    batch mixes classes evenly."""
    keys = np.empty(class_of.shape[0])
    for c in np.unique(class_of):
        idx = np.flatnonzero(class_of == c)
        ranks = rng.permutation(idx.shape[0])
        keys[idx] = (ranks + rng.uniform(0, 1, idx.shape[0])) / idx.shape[0]
    return np.argsort(keys, kind="stable")


def model_inputs(bundle: DatasetBundle) -> np.ndarray:
    return bundle.payload


def new_params(bundle: DatasetBundle, config: TrainConfig) -> ModelParams:
    if bundle.images is not None:
        return apn.init_params(bundle.schema.k, config.channels, bundle.images.shape[1],
                               seed=config.seed, dtype=config.dtype)
    return apn.init_params(bundle.schema.k, (), seed=config.seed, dtype=config.dtype,
                           feature_dim=bundle.features.shape[-1])


def train_step(params: ModelParams, opt: Adam, x: np.ndarray, labels: np.ndarray, phi_seen: np.ndarray,
               seen_ids: Sequence[int], groups, config: TrainConfig) -> LossBreakdown:
    opt.zero_grad()
    _, losses = apn.forward(x, labels, params, phi_seen, seen_ids, groups, config)
    losses.graph.backward()
    opt.step()
    return losses


def train(bundle: DatasetBundle, config: TrainConfig, params: ModelParams | None = None,
          progress: bool = False) -> tuple[ModelParams, RunLog]:
    """Train on the seen-class training images of ``bundle``.

    When the bundle has validation classes the parameters from the epoch
    with the best validation ZSL accuracy are returned (earliest on ties);
    otherwise the final parameters are.
    """
    from .evaluation import zsl_accuracy

    params = new_params(bundle, config) if params is None else params
    runlog = RunLog()
    if config.epochs == 0:
        return params, runlog

    split = bundle.split_indices(config.test_fraction)
    train_idx = split["train"]
    if train_idx.size == 0:
        raise ValueError("bundle has no seen-class training images")
    seen_ids = bundle.classes.ids_in("seen")
    phi_seen = bundle.classes.rows(seen_ids)
    groups = bundle.schema.groups
    labels_all = np.array([s.class_id for s in bundle.samples])
    inputs = model_inputs(bundle)
    has_val = split["val"].size > 0
    if has_val and len(bundle.classes.ids_in("val")) < 2:
        warnings.warn("validation split has a single class; validation accuracy is trivially 1")

    opt = Adam(params.tensors(), config.lr, config.beta1, config.beta2)
    rng = np.random.default_rng(config.seed)
    best, best_score = None, -np.inf
    for epoch in range(config.epochs):
        start = time.perf_counter()
        opt.lr = config.lr * config.lr_decay ** (epoch // config.lr_step)
        order = train_idx[balanced_order(labels_all[train_idx], rng)]
        sums = np.zeros(5)
        seen_count = 0
        for b in range(0, order.size, config.batch_size):
            batch = order[b:b + config.batch_size]
            losses = train_step(params, opt, inputs[batch], labels_all[batch], phi_seen, seen_ids, groups, config)
            vals = np.array([losses.l_cls, losses.l_reg, losses.l_ad, losses.l_cpt, losses.total])
            if not np.all(np.isfinite(vals)):
                raise DivergenceError(epoch, "loss")
            if config.debug and not params.all_finite():
                raise DivergenceError(epoch, "parameter")
            sums += vals * batch.size
            seen_count += batch.size
        if not params.all_finite():
            raise DivergenceError(epoch, "parameter")
        mean = sums / seen_count
        val_t1 = float("nan")
        if has_val:
            val_t1 = zsl_accuracy(bundle, params, split["val"], bundle.classes.ids_in("val"), config.zoom)
            if val_t1 > best_score:
                best_score, best = val_t1, params.copy()
                runlog.best_epoch = epoch
        rec = EpochRecord(epoch, *mean, val_t1, opt.lr, time.perf_counter() - start)
        runlog.records.append(rec)
        msg = (f"epoch {epoch}: cls={rec.l_cls:.4f} reg={rec.l_reg:.4f} ad={rec.l_ad:.4f} "
               f"cpt={rec.l_cpt:.4f} total={rec.total:.4f} val={val_t1:.3f} ({rec.seconds:.1f}s)")
        log.info(msg)
        if progress:
            print(msg, flush=True)
    if best is None:
        runlog.best_epoch = config.epochs - 1
        return params, runlog
    return best, runlog


@dataclass
class GridResult:
    config: TrainConfig
    gamma: float
    table: list[tuple[float, float, float, float]]  # lambda1, gamma, val T1, val H

    def table_text(self) -> str:
        rows = ["lambda1\tgamma\tval_t1\tval_h"]
        rows += [f"{l1!r}\t{g!r}\t{t1:.6f}\t{h:.6f}" for l1, g, t1, h in self.table]
        return "\n".join(rows) + "\n"


def grid_search(bundle: DatasetBundle, base: TrainConfig, lambda1_grid: Sequence[float],
                gamma_grid: Sequence[float] = (0.0,)) -> GridResult:
    """Exhaustive search scored on the validation classes.

    Each ``lambda1`` is trained once; every ``gamma`` is then scored by
    validation GZSL harmonic mean with the validation classes playing the
    unseen role. Selection maximises (val ZSL T1, val H) and breaks ties
    toward smaller ``lambda1`` then smaller ``gamma``.
    """
    from .evaluation import gzsl_scores, zsl_accuracy

    if not lambda1_grid or not gamma_grid:
        raise ValueError("grid_search: empty grid")
    val_ids = bundle.classes.ids_in("val")
    if not val_ids:
        raise ValueError("grid_search needs validation classes")
    if len(val_ids) == 1:
        warnings.warn("validation split has a single class; ZSL accuracy over it is trivially 1")
    split = bundle.split_indices(base.test_fraction)
    table = []
    best_key, best = None, None
    for l1 in sorted(lambda1_grid):
        cfg = dataclasses.replace(base, lambda1=float(l1))
        params, _ = train(bundle, cfg)
        t1 = zsl_accuracy(bundle, params, split["val"], val_ids, cfg.zoom)
        for gamma in sorted(gamma_grid):
            _, _, h = gzsl_scores(bundle, params, split["test_seen"], split["val"],
                                  bundle.classes.ids_in("seen"), val_ids, gamma, cfg.zoom)
            table.append((float(l1), float(gamma), t1, h))
            key = (t1, h)
            if best_key is None or key > best_key:
                best_key, best = key, (cfg, float(gamma))
    for row in table:
        log.info("grid lambda1=%s gamma=%s val_t1=%.4f val_h=%.4f", *row)
    return GridResult(best[0], best[1], table)
