"""Attribute prototype network: encoder, global branch, prototype branch,
zoom-in crop and the joint objective.

All functions work on batches: images are ``[N, 3, S, S]``, feature maps
``[N, H, W, C]`` and similarity maps ``[N, K, H, W]``. A single image can be
passed with the batch axis omitted wherever noted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BadMagicError, TruncatedFileError, VersionMismatchError, BundleError, read_records, write_records
from .tensor import Tensor

CKPT_MAGIC = b"APNCKPT1"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    conv_weights: list[Tensor]
    conv_biases: list[Tensor]
    V: Tensor  # [C, K]
    P: Tensor  # [K, C]

    def __post_init__(self):
        c, k = self.V.shape
        if self.P.shape != (k, c):
            raise ValueError(f"P must be [K, C] = [{k}, {c}], got {self.P.shape}")
        if self.conv_weights and self.conv_weights[-1].shape[0] != c:
            raise ValueError("last encoder block must output C channels")

    @property
    def k(self) -> int:
        return self.V.shape[1]

    @property
    def c(self) -> int:
        return self.V.shape[0]

    @property
    def dtype(self):
        return self.V.dtype

    def named(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out += [(f"conv{i}.weight", w), (f"conv{i}.bias", b)]
        return out + [("V", self.V), ("P", self.P)]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def copy(self, requires_grad: bool = True) -> "ModelParams":
        def cp(t):
            return Tensor(t.data.copy(), requires_grad=requires_grad)

        return ModelParams([cp(w) for w in self.conv_weights], [cp(b) for b in self.conv_biases],
                           cp(self.V), cp(self.P))

    def frozen(self) -> "ModelParams":
        """Views of the same arrays that do not record a graph."""
        def fz(t):
            return Tensor(t.data)

        return ModelParams([fz(w) for w in self.conv_weights], [fz(b) for b in self.conv_biases],
                           fz(self.V), fz(self.P))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors())

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.named(), other.named()
        return len(a) == len(b) and all(
            n1 == n2 and t1.data.dtype == t2.data.dtype and t1.shape == t2.shape
            and t1.data.tobytes() == t2.data.tobytes()
            for (n1, t1), (n2, t2) in zip(a, b))


def _glorot(rng, shape, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


def init_params(k: int, channels: Sequence[int] = (16, 32, 64), in_channels: int = 3,
                seed: int = 0, dtype=np.float32, feature_dim: int | None = None) -> ModelParams:
    """Glorot-uniform initialisation. With ``channels=()`` the encoder is the
    identity and ``feature_dim`` sets C (precomputed-feature bundles)."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    cin = in_channels
    for cout in channels:
        ws.append(_glorot(rng, (cout, cin, 3, 3), cin * 9, cout * 9, dtype))
        bs.append(Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
        cin = cout
    c = channels[-1] if channels else feature_dim
    if c is None:
        raise ValueError("feature_dim is required when the encoder is empty")
    V = _glorot(rng, (c, k), c, k, dtype)
    # prototypes use C for both fans
    P = _glorot(rng, (k, c), c, c, dtype)
    return ModelParams(ws, bs, V, P)


# ---------------------------------------------------------------------------
# global branch
# ---------------------------------------------------------------------------

def encode(images, params: ModelParams) -> Tensor:
    """Feature map ``[N, H, W, C]`` (``[H, W, C]`` for a single image).

    Each block is a 3x3 stride-2 convolution followed by ReLU, so
    ``H = W = S / 2**B``. With an empty encoder the input is taken to be a
    precomputed ``[N, H, W, C]`` feature map and returned as is.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=params.dtype))
    if not params.conv_weights:
        return x
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    expected = params.conv_weights[0].shape[1]
    if x.ndim != 4 or x.shape[1] != expected:
        raise ValueError(f"encode: expected images with {expected} channels, got shape {x.shape}")
    h = x
    for w, b in zip(params.conv_weights, params.conv_biases):
        h = T.relu(T.conv2d(h, w, b, stride=2, pad=1))
    f = T.transpose(h, (0, 2, 3, 1))
    return T.reshape(f, f.shape[1:]) if single else f


def global_feature(f: Tensor) -> Tensor:
    """Spatial average of ``f[..., H, W, C]``."""
    axes = tuple(range(f.ndim - 3)) + (f.ndim - 1, f.ndim - 3, f.ndim - 2)
    return T.mean_spatial(T.transpose(f, axes))


def base_logits(g: Tensor, V: Tensor, class_attributes) -> Tensor:
    """Compatibility ``g^T V phi(y)`` against every row of ``class_attributes``."""
    phi = np.asarray(class_attributes)
    if phi.ndim != 2 or phi.shape[0] == 0:
        raise ValueError("base_logits: need a non-empty [n_classes, K] attribute table")
    if phi.shape[1] != V.shape[1] or g.shape[-1] != V.shape[0]:
        raise ValueError(f"base_logits: g {g.shape}, V {V.shape}, phi {phi.shape} do not conform")
    return T.matmul(T.matmul(g, V), Tensor(np.ascontiguousarray(phi.T, dtype=V.dtype)))


def cls_loss(logits: Tensor, true_class, seen_ids: Sequence[int]) -> Tensor:
    """Cross-entropy over seen classes; column ``j`` of ``logits`` scores
    ``seen_ids[j]``."""
    pos = {c: j for j, c in enumerate(seen_ids)}
    labels = np.atleast_1d(np.asarray(true_class))
    try:
        target = np.array([pos[int(c)] for c in labels])
    except KeyError as exc:
        raise ValueError(f"class {exc.args[0]} is not in the seen set") from exc
    if logits.shape[-1] != len(seen_ids):
        raise ValueError("one logit column per seen class required")
    return T.softmax_ce(logits, target if logits.ndim > 1 else target[0])


# ---------------------------------------------------------------------------
# prototype branch
# ---------------------------------------------------------------------------

def similarity_maps(f: Tensor, P: Tensor) -> Tensor:
    """``M[..., k, i, j] = <P[k], f[..., i, j, :]>``."""
    if f.shape[-1] != P.shape[1]:
        raise ValueError(f"similarity_maps: feature depth {f.shape[-1]} vs prototype depth {P.shape[1]}")
    m = T.matmul(f, T.transpose(P))
    nd = m.ndim
    axes = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    return T.transpose(m, axes)


def predict_attributes(M: Tensor) -> tuple[Tensor, np.ndarray]:
    """Max-pool each similarity map; peaks are the first row-major maxima."""
    return T.max_spatial(M)


def reg_loss(a_hat: Tensor, phi_y) -> Tensor:
    return T.mse(a_hat, np.asarray(phi_y, dtype=a_hat.dtype))


def ad_loss(P: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Group-sparsity penalty on prototype columns, one l2 norm per
    (group, channel)."""
    return T.group_l2(P, groups)


def peak_distance_weights(shape, peaks: np.ndarray) -> np.ndarray:
    """``(i - pi)^2 + (j - pj)^2`` for every map of ``shape = (..., H, W)``."""
    h, w = shape[-2:]
    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]
    pi = peaks[..., 0][..., None, None]
    pj = peaks[..., 1][..., None, None]
    return (ii - pi) ** 2 + (jj - pj) ** 2


def cpt_loss(M: Tensor, peaks: np.ndarray, clamp: bool = True) -> Tensor:
    """Similarity mass weighted by squared distance to each map's peak,
    normalised by ``K*H*W`` and averaged over the batch.

    With ``clamp`` only the positive part of ``M`` counts; the unclamped sum
    is unbounded below once similarities can go negative.
    """
    k, h, w = M.shape[-3:]
    nb = int(np.prod(M.shape[:-3])) if M.ndim > 3 else 1
    weights = peak_distance_weights(M.shape, peaks).astype(M.dtype)
    mass = T.relu(M) if clamp else M
    return T.scale(T.sum_(T.mul(mass, weights)), 1.0 / (k * h * w * nb))


# ---------------------------------------------------------------------------
# zoom-in
# ---------------------------------------------------------------------------

@dataclass
class ZoomInResult:
    selected: list[int]
    informative_map: np.ndarray
    threshold: float
    mask: np.ndarray
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive
    image: np.ndarray
    logits: np.ndarray | None = None


def upsample_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a boolean ``[H, W]`` mask."""
    h, w = mask.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return mask[rows][:, cols]


def resize_crop(image: np.ndarray, box, size: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    return T.bilinear_upsample(image[:, y0:y1 + 1, x0:x1 + 1], size, size).astype(image.dtype)


def zoom_in(M, a_hat, groups: Sequence[Sequence[int]], image) -> ZoomInResult:
    """Crop ``image`` to the region attended by the top attribute of each group."""
    m = np.asarray(M.data if isinstance(M, Tensor) else M)
    a = np.asarray(a_hat.data if isinstance(a_hat, Tensor) else a_hat)
    img = np.asarray(image)
    if not groups:
        raise ValueError("zoom_in needs at least one attribute group")
    selected = []
    for grp in groups:
        idx = sorted(grp)
        selected.append(idx[int(np.argmax(a[idx]))])
    informative = m[selected].sum(axis=0)
    # rounding can put the mean a hair above a (near-)constant map's maximum
    threshold = min(float(informative.mean()), float(informative.max()))
    mask = informative >= threshold
    size = img.shape[-1]
    big = upsample_mask(mask, img.shape[-2], size)
    ys = np.flatnonzero(big.any(axis=1))
    xs = np.flatnonzero(big.any(axis=0))
    box = (int(xs[0]), int(ys[0]), int(xs[-1]), int(ys[-1]))
    return ZoomInResult(selected, informative, threshold, mask.astype(np.uint8), box,
                        resize_crop(img, box, size))


def zoom_batch(M: np.ndarray, a_hat: np.ndarray, groups, images: np.ndarray):
    results = [zoom_in(M[n], a_hat[n], groups, images[n]) for n in range(images.shape[0])]
    return np.stack([r.image for r in results]), results


# ---------------------------------------------------------------------------
# joint forward pass
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    f: Tensor
    g: Tensor
    M: Tensor
    a_hat: Tensor
    peaks: np.ndarray
    logits: Tensor
    zoom: list[ZoomInResult] | None = None
    g_zoom: Tensor | None = None


@dataclass
class LossBreakdown:
    l_cls: float
    l_reg: float
    l_ad: float
    l_cpt: float
    total: float
    lambda1: float
    lambda2: float
    lambda3: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def weighted_sum(self) -> float:
        return self.l_cls + self.lambda1 * self.l_reg + self.lambda2 * self.l_ad + self.lambda3 * self.l_cpt


def zoom_active(config, groups, params: ModelParams) -> bool:
    return bool(config.zoom and groups and params.conv_weights)


def forward(images, labels, params: ModelParams, class_attributes: np.ndarray, seen_ids: Sequence[int],
            groups: Sequence[Sequence[int]], config) -> tuple[ForwardTrace, LossBreakdown]:
    """Joint forward pass on a batch of seen-class training images.

    ``class_attributes`` holds one row per entry of ``seen_ids``; ``labels``
    are class ids. ``config`` supplies ``lambda1..3`` and the boolean toggles
    ``reg, ad, cpt, zoom``. Disabled terms are not built into the graph and
    report 0.
    """
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=params.dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    labels = np.atleast_1d(np.asarray(labels))
    pos = {c: j for j, c in enumerate(seen_ids)}
    phi_y = np.asarray(class_attributes)[[pos[int(c)] for c in labels]]

    f = encode(x, params)
    g = global_feature(f)
    logits = base_logits(g, params.V, class_attributes)
    M = similarity_maps(f, params.P)
    a_hat, peaks = predict_attributes(M)

    zoom_results = None
    g_zoom = None
    if zoom_active(config, groups, params):
        crops, zoom_results = zoom_batch(M.data, a_hat.data, groups, x)
        g_zoom = global_feature(encode(crops, params))
        zlog = base_logits(g_zoom, params.V, class_attributes)
        for r, row in zip(zoom_results, zlog.data):
            r.logits = row
        logits = logits + zlog

    l_cls = cls_loss(logits, labels, seen_ids)
    total = l_cls
    parts = {"l_reg": 0.0, "l_ad": 0.0, "l_cpt": 0.0}
    if config.reg:
        l_reg = reg_loss(a_hat, phi_y)
        parts["l_reg"] = l_reg.item()
        total = total + T.scale(l_reg, config.lambda1)
    if config.ad and groups:
        l_ad = ad_loss(params.P, groups)
        parts["l_ad"] = l_ad.item()
        total = total + T.scale(l_ad, config.lambda2)
    if config.cpt:
        l_cpt = cpt_loss(M, peaks, getattr(config, "cpt_clamp", True))
        parts["l_cpt"] = l_cpt.item()
        total = total + T.scale(l_cpt, config.lambda3)

    trace = ForwardTrace(f, g, M, a_hat, peaks, logits, zoom_results, g_zoom)
    losses = LossBreakdown(l_cls.item(), parts["l_reg"], parts["l_ad"], parts["l_cpt"], total.item(),
                           config.lambda1, config.lambda2, config.lambda3, graph=total)
    return trace, losses


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

@dataclass
class Embedding:
    """Per-image quantities needed by every evaluation mode."""

    g: np.ndarray  # [N, C]
    g_zoom: np.ndarray | None
    projected: np.ndarray  # [N, K] = (g + g_zoom) V
    M: np.ndarray  # [N, K, H, W]
    a_hat: np.ndarray
    peaks: np.ndarray
    boxes: list | None = None

    def logits(self, class_attributes: np.ndarray) -> np.ndarray:
        return self.projected @ np.asarray(class_attributes, dtype=self.projected.dtype).T


def embed(params: ModelParams, inputs: np.ndarray, groups, zoom: bool, batch_size: int = 64) -> Embedding:
    """Graph-free forward over ``inputs`` in fixed-order batches."""
    frozen = params.frozen()
    use_zoom = bool(zoom and groups and params.conv_weights)
    gs, gz, ms, boxes = [], [], [], []
    for start in range(0, inputs.shape[0], batch_size):
        x = np.asarray(inputs[start:start + batch_size], dtype=params.dtype)
        f = encode(x, frozen)
        M = similarity_maps(f, frozen.P)
        gs.append(global_feature(f).data)
        ms.append(M.data)
        if use_zoom:
            a = M.data.reshape(M.shape[0], M.shape[1], -1).max(axis=2)
            crops, res = zoom_batch(M.data, a, groups, x)
            gz.append(global_feature(encode(crops, frozen)).data)
            boxes += [r.box for r in res]
    g = np.concatenate(gs)
    g_zoom = np.concatenate(gz) if use_zoom else None
    V = params.V.data
    projected = g @ V if g_zoom is None else g @ V + g_zoom @ V
    M = np.concatenate(ms)
    flat = M.reshape(M.shape[0], M.shape[1], -1)
    idx = flat.argmax(axis=2)
    a_hat = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    peaks = np.stack([idx // M.shape[-1], idx % M.shape[-1]], axis=-1)
    return Embedding(g, g_zoom, projected, M, a_hat, peaks, boxes if use_zoom else None)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config_text: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        write_records(fh, [(name, t.data) for name, t in params.named()])
        raw = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def load_checkpoint(path) -> tuple[ModelParams, str]:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise TruncatedFileError(path, "file shorter than checkpoint header")
    if buf[:8] != CKPT_MAGIC:
        raise BadMagicError(path, "bad magic")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise VersionMismatchError(path, f"checkpoint version {version}, expected {CKPT_VERSION}")
    records, off = read_records(buf, 12, path)
    if off + 4 > len(buf):
        raise TruncatedFileError(path, "missing config block")
    (tlen,) = struct.unpack_from("<I", buf, off)
    if off + 4 + tlen != len(buf):
        raise TruncatedFileError(path, "config block length does not match file size")
    text = buf[off + 4:off + 4 + tlen].decode("utf-8")
    named = dict(records)
    n_blocks = sum(1 for n in named if n.endswith(".weight"))
    try:
        ws = [Tensor(named[f"conv{i}.weight"].copy(), requires_grad=True) for i in range(n_blocks)]
        bs = [Tensor(named[f"conv{i}.bias"].copy(), requires_grad=True) for i in range(n_blocks)]
        params = ModelParams(ws, bs, Tensor(named["V"].copy(), requires_grad=True),
                             Tensor(named["P"].copy(), requires_grad=True))
    except (KeyError, ValueError) as exc:
        raise BundleError(path, f"incomplete or inconsistent parameters ({exc})") from exc
    return params, text
