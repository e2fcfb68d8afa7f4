"""Any-shot inference, accuracy metrics, attribute localization and PCP."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetBundle, make_episodes
from .model import Embedding, ModelParams, embed
from .tensor import bilinear_upsample

log = logging.getLogger(__name__)

MODES = ("zsl", "gzsl", "fsl", "gfsl")


@dataclass
class EvalConfig:
    mode: str = "zsl"
    gamma: float = 0.0
    way: int = 5
    shot: int = 1
    query: int = 15
    episodes: int = 600
    shots: int = 1
    rho: float = 0.25
    seed: int = 7
    zoom: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if min(self.way, self.shot, self.query, self.episodes, self.shots) < 1:
            raise ValueError("way, shot, query, episodes and shots must be positive")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def per_class_accuracy(y_true: Sequence[int], y_pred: Sequence[int], class_ids: Sequence[int] | None = None):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    ids = sorted(set(y_true.tolist())) if class_ids is None else list(class_ids)
    out = {}
    for c in ids:
        sel = y_true == c
        if sel.any():
            out[int(c)] = float(np.mean(y_pred[sel] == c))
    return out


def mean_class_accuracy(y_true, y_pred, class_ids=None) -> float:
    acc = per_class_accuracy(y_true, y_pred, class_ids)
    return float(np.mean(list(acc.values()))) if acc else float("nan")


def harmonic_mean(u: float, s: float) -> float:
    return 0.0 if u + s == 0 else 2 * u * s / (u + s)


@dataclass
class EvalReport:
    mode: str
    per_class: dict[int, float] = field(default_factory=dict)
    t1: float = float("nan")
    u: float = float("nan")
    s: float = float("nan")
    h: float = float("nan")
    pcp: dict[str, float] = field(default_factory=dict)
    mean_pcp: float = float("nan")
    confusion: dict[tuple[int, int], int] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    HEADER = "# apn-eval-report v1\nkind\tkey\tvalue"

    def to_text(self) -> str:
        rows = [self.HEADER, f"meta\tmode\t{self.mode}"]
        for name in ("t1", "u", "s", "h", "mean_pcp"):
            rows.append(f"summary\t{name}\t{getattr(self, name)!r}")
        rows += [f"extra\t{k}\t{v!r}" for k, v in self.extra.items()]
        rows += [f"class\t{c}\t{a!r}" for c, a in sorted(self.per_class.items())]
        rows += [f"pcp\t{p}\t{v!r}" for p, v in self.pcp.items()]
        rows += [f"confusion\t{t}:{p}\t{n}" for (t, p), n in sorted(self.confusion.items())]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        lines = text.splitlines()
        if "\n".join(lines[:2]) != cls.HEADER:
            raise ValueError("not an eval report (header mismatch)")
        rep = cls(mode="")
        for ln in lines[2:]:
            kind, key, value = ln.split("\t")
            if kind == "meta":
                rep.mode = value
            elif kind == "summary":
                setattr(rep, key, float(value))
            elif kind == "extra":
                rep.extra[key] = float(value)
            elif kind == "class":
                rep.per_class[int(key)] = float(value)
            elif kind == "pcp":
                rep.pcp[key] = float(value)
            elif kind == "confusion":
                t, p = key.split(":")
                rep.confusion[(int(t), int(p))] = int(value)
        return rep

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def confusion_counts(y_true, y_pred) -> dict[tuple[int, int], int]:
    out: dict[tuple[int, int], int] = {}
    for t, p in zip(np.asarray(y_true).tolist(), np.asarray(y_pred).tolist()):
        out[(t, p)] = out.get((t, p), 0) + 1
    return out


# ---------------------------------------------------------------------------
# zero-shot
# ---------------------------------------------------------------------------

def zsl_predict(logits: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    """Argmax over candidate classes; ties go to the smallest class id."""
    if len(class_ids) == 0:
        raise ValueError("zsl_predict: empty candidate set")
    ids = np.asarray(class_ids)
    order = np.argsort(ids, kind="stable")
    z = np.atleast_2d(np.asarray(logits))[:, order]
    return ids[order][z.argmax(axis=1)]


def gzsl_predict(logits: np.ndarray, class_ids: Sequence[int], seen: Sequence[bool], gamma: float) -> np.ndarray:
    """Calibrated stacking: subtract ``gamma`` from seen-class scores before the argmax."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)) - gamma * np.asarray(seen, dtype=np.float64)
    return zsl_predict(z, class_ids)


def _labels(bundle: DatasetBundle, idx: np.ndarray) -> np.ndarray:
    return np.array([bundle.samples[i].class_id for i in idx], dtype=np.int64)


def embed_indices(bundle: DatasetBundle, params: ModelParams, idx: np.ndarray, zoom: bool) -> Embedding:
    return embed(params, bundle.payload[idx], bundle.schema.groups, zoom)


def zsl_accuracy(bundle, params, idx, class_ids, zoom: bool, emb: Embedding | None = None) -> float:
    emb = emb or embed_indices(bundle, params, idx, zoom)
    pred = zsl_predict(emb.logits(bundle.classes.rows(class_ids)), class_ids)
    return mean_class_accuracy(_labels(bundle, idx), pred, class_ids)


def evaluate_zsl(bundle: DatasetBundle, params: ModelParams, zoom: bool = True,
                 test_fraction: float = 0.2) -> EvalReport:
    idx = bundle.split_indices(test_fraction)["test_unseen"]
    ids = bundle.classes.ids_in("unseen")
    if not ids:
        raise ValueError("bundle has no unseen classes")
    emb = embed_indices(bundle, params, idx, zoom)
    y = _labels(bundle, idx)
    pred = zsl_predict(emb.logits(bundle.classes.rows(ids)), ids)
    per = per_class_accuracy(y, pred, ids)
    return EvalReport("zsl", per, float(np.mean(list(per.values()))), confusion=confusion_counts(y, pred))


def gzsl_scores(bundle, params, seen_idx, unseen_idx, seen_ids, unseen_ids, gamma, zoom,
                emb_seen: Embedding | None = None, emb_unseen: Embedding | None = None):
    """``(u, s, H)`` with candidates ``seen_ids + unseen_ids``."""
    ids = list(seen_ids) + list(unseen_ids)
    flags = [True] * len(seen_ids) + [False] * len(unseen_ids)
    phi = bundle.classes.rows(ids)
    emb_seen = emb_seen or embed_indices(bundle, params, seen_idx, zoom)
    emb_unseen = emb_unseen or embed_indices(bundle, params, unseen_idx, zoom)
    s = mean_class_accuracy(_labels(bundle, seen_idx), gzsl_predict(emb_seen.logits(phi), ids, flags, gamma),
                            seen_ids)
    u = mean_class_accuracy(_labels(bundle, unseen_idx), gzsl_predict(emb_unseen.logits(phi), ids, flags, gamma),
                            unseen_ids)
    return u, s, harmonic_mean(u, s)


def evaluate_gzsl(bundle: DatasetBundle, params: ModelParams, gamma: float, zoom: bool = True,
                  test_fraction: float = 0.2) -> EvalReport:
    split = bundle.split_indices(test_fraction)
    seen_ids = bundle.classes.ids_in("seen")
    unseen_ids = bundle.classes.ids_in("unseen")
    ids = seen_ids + unseen_ids
    flags = [True] * len(seen_ids) + [False] * len(unseen_ids)
    idx = np.concatenate([split["test_seen"], split["test_unseen"]])
    emb = embed_indices(bundle, params, idx, zoom)
    y = _labels(bundle, idx)
    pred = gzsl_predict(emb.logits(bundle.classes.rows(ids)), ids, flags, gamma)
    per = per_class_accuracy(y, pred, ids)
    s = float(np.mean([per[c] for c in seen_ids if c in per]))
    u = float(np.mean([per[c] for c in unseen_ids if c in per]))
    rep = EvalReport("gzsl", per, float(np.mean(list(per.values()))), u, s, harmonic_mean(u, s),
                     confusion=confusion_counts(y, pred))
    rep.extra["gamma"] = float(gamma)
    rep.extra["seen_predictions"] = float(np.isin(pred, seen_ids).sum())
    return rep


def calibrate_gamma(bundle: DatasetBundle, params: ModelParams, grid: Sequence[float] | None = None,
                    zoom: bool = True, test_fraction: float = 0.2) -> float:
    """Pick the calibration factor maximising harmonic mean on validation
    classes (standing in for unseen ones) and held-out seen images.

    Falls back to 0 when the bundle has no validation classes.
    """
    grid = [round(0.1 * i, 10) for i in range(11)] if grid is None else list(grid)
    val_ids = bundle.classes.ids_in("val")
    if not val_ids:
        warnings.warn("no validation classes; using gamma = 0")
        return 0.0
    split = bundle.split_indices(test_fraction)
    seen_ids = bundle.classes.ids_in("seen")
    es = embed_indices(bundle, params, split["test_seen"], zoom)
    ev = embed_indices(bundle, params, split["val"], zoom)
    best_g, best_h = grid[0], -1.0
    for gamma in sorted(grid):
        _, _, h = gzsl_scores(bundle, params, split["test_seen"], split["val"], seen_ids, val_ids, gamma, zoom,
                              es, ev)
        if h > best_h:
            best_g, best_h = gamma, h
    return float(best_g)


# ---------------------------------------------------------------------------
# few-shot
# ---------------------------------------------------------------------------

def _unit_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    ok = norms > 0
    if not ok.all():
        warnings.warn(f"{(~ok).sum()} zero-norm {what} feature(s) excluded")
    return x[ok] / norms[ok][:, None], ok


def fsl_fit_predict(support: np.ndarray, support_labels: Sequence[int], query: np.ndarray):
    """Nearest class mean under cosine similarity.

    Returns ``(labels, scores)``; query rows with zero norm are labelled -1.
    """
    support = np.asarray(support, dtype=np.float64)
    labels = np.asarray(support_labels)
    s_unit, ok = _unit_rows(support, "support")
    labels = labels[ok]
    classes = np.unique(labels)
    if classes.size == 0:
        raise ValueError("no usable support features")
    centroids = np.stack([support[ok][labels == c].mean(axis=0) for c in classes])
    c_unit, c_ok = _unit_rows(centroids, "centroid")
    classes = classes[c_ok]
    q = np.asarray(query, dtype=np.float64)
    q_unit, q_ok = _unit_rows(q, "query")
    scores = np.full((q.shape[0], classes.size), np.nan)
    scores[q_ok] = q_unit @ c_unit.T
    pred = np.full(q.shape[0], -1, dtype=np.int64)
    pred[q_ok] = classes[np.argmax(scores[q_ok], axis=1)]
    return pred, scores


def fsl_episodes(bundle: DatasetBundle, params: ModelParams, way: int, shot: int, query: int,
                 episodes: int, seed: int, zoom: bool = False, features: np.ndarray | None = None):
    """Episode accuracies on the unseen (novel) split; returns
    ``(mean, 95% half-width, per-episode accuracies)``."""
    eps = make_episodes(bundle, way, shot, query, episodes, seed)
    novel = bundle.samples_of(bundle.classes.ids_in("unseen"))
    if features is None:
        feats = embed_indices(bundle, params, novel, zoom).g
        features = np.zeros((len(bundle.samples), feats.shape[1]), dtype=feats.dtype)
        features[novel] = feats
    accs = []
    for ep in eps:
        s_idx = [i for i, _ in ep.support]
        q_idx = [i for i, _ in ep.query]
        pred, _ = fsl_fit_predict(features[s_idx], [c for _, c in ep.support], features[q_idx])
        accs.append(float(np.mean(pred == np.array([c for _, c in ep.query]))))
    accs = np.array(accs)
    half = 1.96 * accs.std(ddof=1) / math.sqrt(len(accs)) if len(accs) > 1 else 0.0
    return float(accs.mean()), float(half), accs


def evaluate_fsl(bundle, params, cfg: EvalConfig) -> EvalReport:
    mean, half, _ = fsl_episodes(bundle, params, cfg.way, cfg.shot, cfg.query, cfg.episodes, cfg.seed, cfg.zoom)
    rep = EvalReport("fsl", t1=mean)
    rep.extra.update(ci95=half, way=cfg.way, shot=cfg.shot, episodes=cfg.episodes)
    return rep


def gfsl_eval(bundle: DatasetBundle, params: ModelParams, shots: int, seed: int = 0,
              test_fraction: float = 0.2, features: np.ndarray | None = None) -> EvalReport:
    """All-way nearest-class-mean over base and novel classes.

    Base centroids use every seen training image; each novel class
    contributes ``shots`` randomly reserved images, the rest are test.
    """
    split = bundle.split_indices(test_fraction)
    seen_ids = bundle.classes.ids_in("seen")
    novel_ids = bundle.classes.ids_in("unseen")
    rng = np.random.default_rng(seed)
    support, test_novel = [], []
    for c in novel_ids:
        idx = bundle.samples_of([c])
        if idx.size < shots + 1:
            raise ValueError(f"novel class {c} has {idx.size} images; {shots} shots plus one test image needed")
        pick = rng.permutation(idx)
        support += pick[:shots].tolist()
        test_novel += pick[shots:].tolist()
    if features is None:
        features = embed(params, bundle.payload, bundle.schema.groups, False).g
    sup_idx = np.concatenate([split["train"], np.array(support, dtype=np.int64)])
    test_idx = np.concatenate([split["test_seen"], np.array(sorted(test_novel), dtype=np.int64)])
    pred, _ = fsl_fit_predict(features[sup_idx], _labels(bundle, sup_idx), features[test_idx])
    y = _labels(bundle, test_idx)
    per = per_class_accuracy(y, pred, seen_ids + novel_ids)
    s = float(np.mean([per[c] for c in seen_ids]))
    u = float(np.mean([per[c] for c in novel_ids]))
    rep = EvalReport("gfsl", per, float(np.mean(list(per.values()))), u, s, harmonic_mean(u, s),
                     confusion=confusion_counts(y, pred))
    rep.extra["shots"] = float(shots)
    return rep


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------

def object_box(parts) -> tuple[int, int, int, int]:
    boxes = np.array([b for _, b in parts])
    return int(boxes[:, 0].min()), int(boxes[:, 1].min()), int(boxes[:, 2].max()), int(boxes[:, 3].max())


def peak_box(peak: tuple[int, int], size: int, rho: float, obj: tuple[int, int, int, int] | None):
    """Box of ``rho`` times the object's width and height centred on ``peak``
    (row, col), clipped to the image. Without an object box the image is used."""
    if obj is None:
        obj = (0, 0, size - 1, size - 1)
    bw = max(1, int(round(rho * (obj[2] - obj[0] + 1))))
    bh = max(1, int(round(rho * (obj[3] - obj[1] + 1))))
    r, c = peak
    x0 = c - (bw - 1) // 2
    y0 = r - (bh - 1) // 2
    x0c, y0c = max(0, x0), max(0, y0)
    x1c, y1c = min(size - 1, x0 + bw - 1), min(size - 1, y0 + bh - 1)
    return x0c, y0c, x1c, y1c


def localize(M: np.ndarray, k: int, size: int, rho: float = 0.25, obj=None):
    """Upsampled map of attribute ``k``, its first row-major peak (row, col)
    and the peak box."""
    maps = np.asarray(M)
    if not 0 <= k < maps.shape[0]:
        raise ValueError(f"attribute index {k} out of range")
    heat = bilinear_upsample(maps[k], size, size)
    flat = int(np.argmax(heat))
    peak = (flat // size, flat % size)
    return heat, peak, peak_box(peak, size, rho, obj)


def in_box(peak, box) -> bool:
    r, c = peak
    x0, y0, x1, y1 = box
    return x0 <= c <= x1 and y0 <= r <= y1


def part_peaks(emb: Embedding, groups, size: int) -> np.ndarray:
    """Peak (row, col) of the top-predicted attribute of every group: ``[N, L, 2]``."""
    n = emb.M.shape[0]
    out = np.zeros((n, len(groups), 2), dtype=np.int64)
    for l, grp in enumerate(groups):
        idx = sorted(grp)
        top = np.asarray(idx)[np.argmax(emb.a_hat[:, idx], axis=1)]
        heat = bilinear_upsample(emb.M[np.arange(n), top], size, size)
        flat = heat.reshape(n, -1).argmax(axis=1)
        out[:, l, 0] = flat // size
        out[:, l, 1] = flat % size
    return out


def pcp_from_peaks(bundle: DatasetBundle, idx: np.ndarray, peaks: np.ndarray) -> tuple[dict[str, float], float, int]:
    """Fraction of images whose group peak lies in that part's box.

    ``peaks`` is ``[len(idx), L, 2]``. Images lacking an annotation for a
    part are skipped for that part; the skip count is returned.
    """
    names = bundle.schema.group_names
    hits = np.zeros(len(names))
    totals = np.zeros(len(names))
    skipped = 0
    for row, i in enumerate(idx):
        sample = bundle.samples[i]
        for l in range(len(names)):
            box = sample.part_box(l)
            if box is None:
                skipped += 1
                continue
            totals[l] += 1
            hits[l] += in_box(tuple(peaks[row, l]), box)
    if skipped:
        log.warning("pcp: %d image/part pairs without annotation skipped", skipped)
    per = {n: float(h / t) for n, h, t in zip(names, hits, totals) if t > 0}
    return per, float(np.mean(list(per.values()))) if per else float("nan"), skipped


def pcp(bundle: DatasetBundle, params: ModelParams, idx: np.ndarray | None = None, rho: float = 0.25,
        emb: Embedding | None = None) -> EvalReport:
    if bundle.images is None:
        raise ValueError("pcp needs an image bundle with part annotations")
    if not bundle.schema.groups:
        raise ValueError("pcp needs attribute groups")
    if idx is None:
        split = bundle.split_indices()
        idx = np.concatenate([split["test_seen"], split["test_unseen"]])
    emb = emb or embed_indices(bundle, params, idx, False)
    peaks = part_peaks(emb, bundle.schema.groups, bundle.image_size)
    per, mean, skipped = pcp_from_peaks(bundle, idx, peaks)
    rep = EvalReport("pcp", pcp=per, mean_pcp=mean)
    rep.extra.update(rho=rho, skipped=float(skipped), images=float(len(idx)))
    return rep


def chance_pcp(bundle: DatasetBundle, idx: np.ndarray | None = None) -> float:
    """Expected PCP of a uniformly random peak: mean part-box area over image area."""
    size = bundle.image_size
    idx = np.arange(len(bundle.samples)) if idx is None else idx
    areas = [(x1 - x0 + 1) * (y1 - y0 + 1) for i in idx for _, (x0, y0, x1, y1) in bundle.samples[i].parts]
    return float(np.mean(areas)) / (size * size)


def box_center(box) -> tuple[int, int]:
    x0, y0, x1, y1 = box
    return (y0 + y1) // 2, (x0 + x1) // 2


# ---------------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------------

def normalize_heat(heat: np.ndarray) -> np.ndarray:
    lo, hi = float(heat.min()), float(heat.max())
    if hi <= lo:
        return np.zeros(heat.shape, dtype=np.uint8)
    return np.round((heat - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def draw_box(rgb: np.ndarray, box, color=(255, 0, 0)) -> None:
    x0, y0, x1, y1 = box
    rgb[y0, x0:x1 + 1] = color
    rgb[y1, x0:x1 + 1] = color
    rgb[y0:y1 + 1, x0] = color
    rgb[y0:y1 + 1, x1] = color


def export_heatmaps(image: np.ndarray, M: np.ndarray, attributes: Sequence[int], out_dir, names=None,
                    rho: float = 0.25, obj=None, stem: str = "img") -> list[Path]:
    """Write ``<stem>_attr<k>.pgm`` (min-max normalized upsampled map) and
    ``<stem>_attr<k>.ppm`` (input with the peak box) per attribute."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = image.shape[-1]
    base = np.clip(np.round(np.transpose(image, (1, 2, 0)) * 255), 0, 255).astype(np.uint8)
    written = []
    for k in attributes:
        heat, peak, box = localize(M, k, size, rho, obj)
        label = names[k] if names else f"attr{k}"
        pgm = out / f"{stem}_{label}.pgm"
        ppm = out / f"{stem}_{label}.ppm"
        try:
            write_pgm(pgm, normalize_heat(heat))
            rgb = base.copy()
            draw_box(rgb, box)
            write_ppm(ppm, rgb)
        except OSError as exc:
            raise OSError(f"cannot write heatmap to {exc.filename or out}: {exc.strerror}") from exc
        written += [pgm, ppm]
    return written


