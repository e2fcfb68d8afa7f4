"""Attribute-grounded datasets: synthetic generator, on-disk bundles, episodes."""

from __future__ import annotations

import colorsys
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("seen", "unseen", "val")
TENSOR_MAGIC = b"APNTEN1\x00"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class BundleError(Exception):
    """Malformed or inconsistent dataset bundle."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class BadMagicError(BundleError):
    pass


class VersionMismatchError(BundleError):
    pass


class TruncatedFileError(BundleError):
    pass


class DimensionMismatchError(BundleError):
    pass


class SynthesisError(ValueError):
    pass


class EpisodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class AttributeSchema:
    names: list[str]
    groups: list[list[int]]  # 0-based attribute indices
    group_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.group_names:
            self.group_names = [f"group{l + 1}" for l in range(len(self.groups))]
        seen: set[int] = set()
        for grp in self.groups:
            for k in grp:
                if not 0 <= k < self.k:
                    raise ValueError(f"group index {k} outside [0, {self.k})")
                if k in seen:
                    raise ValueError(f"attribute {k} appears in more than one group")
                seen.add(k)
        if len(self.group_names) != len(self.groups):
            raise ValueError("one name per group required")

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self) -> np.ndarray:
        """Group index per attribute, -1 when ungrouped."""
        out = np.full(self.k, -1, dtype=np.int64)
        for l, grp in enumerate(self.groups):
            out[list(grp)] = l
        return out


@dataclass
class ClassTable:
    ids: list[int]
    attributes: np.ndarray  # [n_classes, K] float64 in [0, 1]
    splits: list[str]

    def __post_init__(self):
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        if self.attributes.ndim != 2 or self.attributes.shape[0] != len(self.ids):
            raise ValueError("one attribute row per class required")
        if len(self.splits) != len(self.ids):
            raise ValueError("one split tag per class required")
        bad = [s for s in self.splits if s not in SPLITS]
        if bad:
            raise ValueError(f"unknown split tag {bad[0]!r}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate class id")
        if not np.all(np.isfinite(self.attributes)):
            raise ValueError("non-finite attribute value")

    def index(self, class_id: int) -> int:
        return self.ids.index(class_id)

    def ids_in(self, split: str) -> list[int]:
        return [c for c, s in zip(self.ids, self.splits) if s == split]

    def rows(self, class_ids: Sequence[int]) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.ids)}
        return self.attributes[[pos[c] for c in class_ids]]


@dataclass
class SampleRecord:
    image_id: int
    class_id: int
    parts: list[tuple[int, tuple[int, int, int, int]]] = field(default_factory=list)

    def part_box(self, part_id: int):
        for pid, box in self.parts:
            if pid == part_id:
                return box
        return None


@dataclass
class DatasetBundle:
    """Schema, class table, sample index and exactly one payload.

    ``images`` is ``[N, 3, S, S]`` and ``features`` is ``[N, H, W, C]``;
    row ``i`` belongs to ``samples[i]``.
    """

    schema: AttributeSchema
    classes: ClassTable
    samples: list[SampleRecord]
    images: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if (self.images is None) == (self.features is None):
            raise ValueError("bundle must carry exactly one of images or features")
        payload = self.payload
        if payload.shape[0] != len(self.samples):
            raise ValueError("payload rows must match sample count")
        if self.classes.attributes.shape[1] != self.schema.k:
            raise ValueError(
                f"class attributes have {self.classes.attributes.shape[1]} columns, schema has K={self.schema.k}")
        known = set(self.classes.ids)
        for s in self.samples:
            if s.class_id not in known:
                raise ValueError(f"sample {s.image_id} references unknown class {s.class_id}")
            for pid, (x0, y0, x1, y1) in s.parts:
                if not 0 <= pid < self.schema.n_groups:
                    raise ValueError(f"sample {s.image_id}: part id {pid} is not a group")
                if self.images is not None:
                    size = self.images.shape[-1]
                    if not (0 <= x0 <= x1 < size and 0 <= y0 <= y1 < size):
                        raise ValueError(f"sample {s.image_id}: part box outside image")

    @property
    def payload(self) -> np.ndarray:
        return self.images if self.images is not None else self.features

    @property
    def image_size(self) -> int | None:
        return None if self.images is None else int(self.images.shape[-1])

    def class_index(self) -> np.ndarray:
        """Row of the class table for every sample."""
        pos = {c: i for i, c in enumerate(self.classes.ids)}
        return np.array([pos[s.class_id] for s in self.samples], dtype=np.int64)

    def samples_of(self, class_ids: Iterable[int]) -> np.ndarray:
        wanted = set(class_ids)
        return np.array([i for i, s in enumerate(self.samples) if s.class_id in wanted], dtype=np.int64)

    def split_indices(self, test_fraction: float = 0.2) -> dict[str, np.ndarray]:
        """Deterministic sample partition.

        Seen classes keep the last ``test_fraction`` of their images (in id
        order) for testing; every image of an unseen or val class is a test
        image of that split.
        """
        by_class: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            by_class.setdefault(s.class_id, []).append(i)
        out = {"train": [], "test_seen": [], "test_unseen": [], "val": []}
        for cid, split in zip(self.classes.ids, self.classes.splits):
            idx = sorted(by_class.get(cid, []), key=lambda i: self.samples[i].image_id)
            if split == "seen":
                n_test = int(round(len(idx) * test_fraction))
                if len(idx) > 1:
                    n_test = min(max(n_test, 1), len(idx) - 1)
                else:
                    n_test = 0
                out["train"] += idx[: len(idx) - n_test]
                out["test_seen"] += idx[len(idx) - n_test:]
            elif split == "unseen":
                out["test_unseen"] += idx
            else:
                out["val"] += idx
        return {k: np.array(sorted(v), dtype=np.int64) for k, v in out.items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetBundle):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.schema == other.schema
            and self.classes.ids == other.classes.ids
            and self.classes.splits == other.classes.splits
            and same(self.classes.attributes, other.classes.attributes)
            and self.samples == other.samples
            and same(self.images, other.images)
            and same(self.features, other.features)
        )


def normalize_attributes(matrix: np.ndarray) -> np.ndarray:
    """Column-wise min-max scaling to [0, 1]; constant columns map to 0."""
    m = np.asarray(matrix, dtype=np.float64)
    lo = m.min(axis=0)
    span = m.max(axis=0) - lo
    return np.where(span > 0, (m - lo) / np.where(span > 0, span, 1), 0.0)


def bundle_from_features(features: np.ndarray, labels: Sequence[int], class_ids: Sequence[int],
                         class_attributes: np.ndarray, splits: Sequence[str],
                         schema: AttributeSchema) -> DatasetBundle:
    """Wrap precomputed ``[N, H, W, C]`` feature maps (e.g. from a real
    dataset) in a bundle, min-max normalizing the attribute table."""
    feats = np.ascontiguousarray(features, dtype=np.float32)
    if feats.ndim != 4:
        raise ValueError("features must be [N, H, W, C]")
    classes = ClassTable(list(map(int, class_ids)), normalize_attributes(class_attributes), list(splits))
    samples = [SampleRecord(i, int(c)) for i, c in enumerate(labels)]
    return DatasetBundle(schema, classes, samples, features=feats)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

SHAPES = ("square", "disk", "cross", "triangle", "ring", "diamond", "hbar", "vbar")


def _glyph_mask(shape: str, g: int) -> np.ndarray:
    yy, xx = np.mgrid[0:g, 0:g]
    c = (g - 1) / 2.0
    r = g / 2.0
    t = max(2, g // 4)
    if shape == "square":
        m = np.ones((g, g), bool)
    elif shape == "disk":
        m = (yy - c) ** 2 + (xx - c) ** 2 <= r * r
    elif shape == "cross":
        m = (np.abs(yy - c) < t / 2 + 0.5) | (np.abs(xx - c) < t / 2 + 0.5)
    elif shape == "triangle":
        m = np.abs(xx - c) <= (yy + 1) / 2.0
    elif shape == "ring":
        d = (yy - c) ** 2 + (xx - c) ** 2
        m = (d <= r * r) & (d >= (r - t) ** 2)
    elif shape == "diamond":
        m = np.abs(yy - c) + np.abs(xx - c) <= r
    elif shape == "hbar":
        m = np.abs(yy - c) < g / 4.0
    elif shape == "vbar":
        m = np.abs(xx - c) < g / 4.0
    else:
        raise ValueError(shape)
    return m


GLYPH_TONES = ((0.9, 1.0), (0.4, 1.0), (1.0, 0.55))  # (saturation, value): vivid, pastel, dark


def glyph_shapes(l_groups: int, variants: int) -> list[list[str]]:
    """Shape name of every (group, variant) glyph: variant ``v`` is
    ``SHAPES[v]`` in every group."""
    return [[SHAPES[v] for v in range(variants)] for _ in range(l_groups)]


def glyph_colors(l_groups: int, variants: int) -> np.ndarray:
    """RGB colour of every (group, variant) glyph: ``[L, V, 3]``.

    Each group owns a hue family ``l / L`` of a turn, so glyphs sharing a
    shape differ in hue by at least ``1/L``. Inside a group the variants
    cycle through vivid, pastel and dark tones; every further block of
    three variants is shifted inside the family.
    """
    blocks = -(-variants // len(GLYPH_TONES))
    out = np.zeros((l_groups, variants, 3))
    for l in range(l_groups):
        for v in range(variants):
            sat, val = GLYPH_TONES[v % len(GLYPH_TONES)]
            hue = (l + (v // len(GLYPH_TONES)) / blocks) / l_groups
            out[l, v] = colorsys.hsv_to_rgb(hue, sat, val)
    return out


def slot_layout(l_groups: int, image_size: int) -> list[tuple[int, int, int]]:
    """``(y0, x0, size)`` of each group's square slot on a near-square grid."""
    cols = int(np.ceil(np.sqrt(l_groups)))
    size = image_size // cols
    return [((l // cols) * size, (l % cols) * size, size) for l in range(l_groups)]


def check_signatures(signatures: np.ndarray, splits: Sequence[str], variants: int) -> None:
    """Raise unless unseen/val signatures are new combinations of attributes
    that each occur in at least one seen class."""
    seen = {tuple(s) for s, sp in zip(signatures, splits) if sp == "seen"}
    for s, sp in zip(signatures, splits):
        if sp != "seen" and tuple(s) in seen:
            raise SynthesisError(f"{sp} signature {tuple(s)} also occurs among seen classes")
    l_groups = signatures.shape[1]
    for l in range(l_groups):
        present = {s[l] for s in seen}
        if len(present) != variants:
            missing = sorted(set(range(variants)) - present)
            raise SynthesisError(f"group {l}: variants {missing} never occur in a seen class")


def signatures_to_attributes(signatures: np.ndarray, variants: int) -> np.ndarray:
    n, l_groups = signatures.shape
    out = np.zeros((n, l_groups * variants))
    for l in range(l_groups):
        out[np.arange(n), l * variants + signatures[:, l]] = 1.0
    return out


def generate_synthetic(n_classes: int = 25, n_unseen: int = 5, k_attrs: int = 12, l_groups: int = 4,
                       image_size: int = 64, imgs_per_class: int = 200, seed: int = 7, n_val: int = 0,
                       jitter: float = 0.0, noise: float = 0.1) -> DatasetBundle:
    """Render a dataset whose classes are combinations of one glyph per slot.

    Group ``l`` owns slot ``l``; its ``K/L`` attributes are glyphs that
    differ in both shape and colour. The per-image glyph position is
    jittered inside the slot and the background is uniform speckle of
    amplitude ``noise``.
    """
    if l_groups < 1 or k_attrs % l_groups:
        raise SynthesisError(f"k_attrs={k_attrs} must be a positive multiple of l_groups={l_groups}")
    variants = k_attrs // l_groups
    if variants > len(SHAPES):
        raise SynthesisError(f"at most {len(SHAPES)} variants per group are renderable, got {variants}")
    if not 0 <= n_unseen + n_val < n_classes:
        raise SynthesisError("need at least one seen class: n_unseen + n_val < n_classes")
    capacity = variants ** l_groups
    if n_classes > capacity:
        raise SynthesisError(
            f"n_classes={n_classes} exceeds the {capacity} distinct signatures available "
            f"with {variants} variants in each of {l_groups} groups")
    if n_classes - n_unseen - n_val < variants:
        raise SynthesisError(f"{variants} seen classes are needed to cover every attribute")

    rng = np.random.default_rng(seed)
    codes = rng.choice(capacity, size=n_classes, replace=False)
    all_sigs = np.array(list(itertools.product(range(variants), repeat=l_groups)), dtype=np.int64)
    signatures = all_sigs[np.sort(codes)]

    splits = None
    for _ in range(1000):
        order = rng.permutation(n_classes)
        tags = ["seen"] * n_classes
        for i in order[:n_unseen]:
            tags[i] = "unseen"
        for i in order[n_unseen:n_unseen + n_val]:
            tags[i] = "val"
        try:
            check_signatures(signatures, tags, variants)
        except SynthesisError:
            continue
        splits = tags
        break
    if splits is None:
        raise SynthesisError("could not find a split in which seen classes cover every attribute")

    attrs = signatures_to_attributes(signatures, variants)
    if jitter > 0:
        attrs = np.clip(attrs + rng.uniform(-jitter, jitter, attrs.shape), 0.0, 1.0)

    shapes = glyph_shapes(l_groups, variants)
    names = []
    groups = []
    for l in range(l_groups):
        groups.append(list(range(l * variants, (l + 1) * variants)))
        for v in range(variants):
            names.append(f"part{l + 1}_{shapes[l][v]}")
    schema = AttributeSchema(names, groups, [f"part{l + 1}" for l in range(l_groups)])
    classes = ClassTable(list(range(n_classes)), attrs, splits)

    layout = slot_layout(l_groups, image_size)
    slot = layout[0][2]
    g = max(3, 5 * slot // 8)
    margin = max(0, slot // 16)
    masks = [[_glyph_mask(shapes[l][v], g) for v in range(variants)] for l in range(l_groups)]
    colors = glyph_colors(l_groups, variants)

    n = n_classes * imgs_per_class
    images = rng.uniform(0.0, noise, size=(n, 3, image_size, image_size)).astype(np.float32)
    samples = []
    for c in range(n_classes):
        for j in range(imgs_per_class):
            idx = c * imgs_per_class + j
            parts = []
            for l, (sy, sx, size) in enumerate(layout):
                lo, hi = margin, size - g - margin
                oy = sy + int(rng.integers(lo, hi + 1))
                ox = sx + int(rng.integers(lo, hi + 1))
                m = masks[l][signatures[c, l]]
                ys, xs = np.nonzero(m)
                for ch in range(3):
                    images[idx, ch, oy + ys, ox + xs] = colors[l, signatures[c, l], ch]
                parts.append((l, (ox + int(xs.min()), oy + int(ys.min()), ox + int(xs.max()), oy + int(ys.max()))))
            samples.append(SampleRecord(idx, c, parts))
    return DatasetBundle(schema, classes, samples, images=images)


# ---------------------------------------------------------------------------
# tensor record files
# ---------------------------------------------------------------------------

def write_records(fh, records: Sequence[tuple[str, np.ndarray]]) -> None:
    fh.write(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for record {name}")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_records(buf: bytes, offset: int, path) -> tuple[list[tuple[str, np.ndarray]], int]:
    def need(n):
        if offset + n > len(buf):
            raise TruncatedFileError(path, f"truncated at byte {offset} (needed {n} more)")

    need(4)
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    out = []
    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        need(nlen + 2)
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        code, ndim = struct.unpack_from("<BB", buf, offset)
        offset += 2
        if code not in _DTYPES:
            raise BundleError(path, f"record {name}: unknown dtype code {code}")
        need(8 * ndim)
        dims = struct.unpack_from(f"<{ndim}Q", buf, offset)
        offset += 8 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(dims)
        offset += nbytes
        out.append((name, arr.astype(dt.newbyteorder("="))))
    return out, offset


def save_tensors(path, records: Sequence[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        write_records(fh, records)


def load_tensors(path) -> list[tuple[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < len(TENSOR_MAGIC):
        raise TruncatedFileError(path, "file shorter than magic header")
    head = buf[: len(TENSOR_MAGIC)]
    if head != TENSOR_MAGIC:
        if head[:6] == TENSOR_MAGIC[:6]:
            raise VersionMismatchError(path, f"unsupported tensor file version {head[6:7]!r}")
        raise BadMagicError(path, "bad magic")
    records, end = read_records(buf, len(TENSOR_MAGIC), path)
    if end != len(buf):
        raise BundleError(path, f"{len(buf) - end} trailing bytes after last record")
    return records


# ---------------------------------------------------------------------------
# bundle directory
# ---------------------------------------------------------------------------

def save_bundle(bundle: DatasetBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    schema = bundle.schema
    gof = schema.group_of()
    lines = [f"{schema.k} {schema.n_groups}"]
    lines += [f"{k + 1} {gof[k] + 1} {name}" for k, name in enumerate(schema.names)]
    lines += [f"{l + 1} {name}" for l, name in enumerate(schema.group_names)]
    (d / "schema.txt").write_text("\n".join(lines) + "\n")

    rows = []
    for cid, split, phi in zip(bundle.classes.ids, bundle.classes.splits, bundle.classes.attributes):
        rows.append("\t".join([str(cid), split] + [repr(float(v)) for v in phi]))
    (d / "classes.tsv").write_text("\n".join(rows) + "\n")

    (d / "samples.tsv").write_text("".join(f"{s.image_id}\t{s.class_id}\n" for s in bundle.samples))
    part_rows = [
        f"{s.image_id}\t{pid + 1}\t{x0}\t{y0}\t{x1}\t{y1}\n"
        for s in bundle.samples for pid, (x0, y0, x1, y1) in s.parts
    ]
    if part_rows:
        (d / "parts.tsv").write_text("".join(part_rows))
    elif (d / "parts.tsv").exists():
        (d / "parts.tsv").unlink()

    prefix = "img" if bundle.images is not None else "feat"
    save_tensors(d / "tensors.bin",
                 [(f"{prefix}/{s.image_id}", bundle.payload[i]) for i, s in enumerate(bundle.samples)])


def _read_schema(path: Path) -> AttributeSchema:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    try:
        k, l_groups = map(int, lines[0].split())
        names = [""] * k
        groups: list[list[int]] = [[] for _ in range(l_groups)]
        for ln in lines[1:1 + k]:
            idx, gidx, name = ln.split(maxsplit=2)
            idx, gidx = int(idx), int(gidx)
            names[idx - 1] = name
            if gidx:
                groups[gidx - 1].append(idx - 1)
        group_names = [ln.split(maxsplit=1)[1] for ln in lines[1 + k:1 + k + l_groups]]
    except (ValueError, IndexError) as exc:
        raise BundleError(path, f"malformed schema ({exc})") from exc
    if len(lines) < 1 + k or any(n == "" for n in names):
        raise BundleError(path, "schema lists fewer attributes than declared")
    try:
        return AttributeSchema(names, groups, group_names if len(group_names) == l_groups else [])
    except ValueError as exc:
        raise BundleError(path, str(exc)) from exc


def load_bundle(directory) -> DatasetBundle:
    d = Path(directory)
    for name in ("schema.txt", "classes.tsv", "samples.tsv", "tensors.bin"):
        if not (d / name).exists():
            raise BundleError(d / name, "missing bundle file")
    schema = _read_schema(d / "schema.txt")

    ids, splits, rows = [], [], []
    cpath = d / "classes.tsv"
    for lineno, ln in enumerate(cpath.read_text().splitlines(), 1):
        if not ln.strip():
            continue
        cols = ln.split("\t")
        if len(cols) - 2 != schema.k:
            raise DimensionMismatchError(
                cpath, f"line {lineno}: {len(cols) - 2} attribute values but schema has K={schema.k}")
        ids.append(int(cols[0]))
        splits.append(cols[1])
        rows.append([float(v) for v in cols[2:]])
    try:
        classes = ClassTable(ids, np.array(rows, dtype=np.float64).reshape(len(ids), schema.k), splits)
    except ValueError as exc:
        raise BundleError(cpath, str(exc)) from exc

    parts: dict[int, list] = {}
    ppath = d / "parts.tsv"
    if ppath.exists():
        for ln in ppath.read_text().splitlines():
            if ln.strip():
                img, pid, x0, y0, x1, y1 = map(int, ln.split("\t"))
                parts.setdefault(img, []).append((pid - 1, (x0, y0, x1, y1)))
    samples = []
    for ln in (d / "samples.tsv").read_text().splitlines():
        if ln.strip():
            img, cid = map(int, ln.split("\t"))
            samples.append(SampleRecord(img, cid, parts.get(img, [])))

    tpath = d / "tensors.bin"
    records = dict(load_tensors(tpath))
    kinds = {name.split("/", 1)[0] for name in records}
    if len(kinds) != 1 or not kinds <= {"img", "feat"}:
        raise BundleError(tpath, f"expected only img/ or only feat/ records, found {sorted(kinds)}")
    kind = kinds.pop()
    try:
        payload = np.stack([records[f"{kind}/{s.image_id}"] for s in samples])
    except KeyError as exc:
        raise BundleError(tpath, f"missing tensor record {exc.args[0]}") from exc
    except ValueError as exc:
        raise DimensionMismatchError(tpath, f"inconsistent tensor shapes ({exc})") from exc
    try:
        if kind == "img":
            return DatasetBundle(schema, classes, samples, images=payload)
        return DatasetBundle(schema, classes, samples, features=payload)
    except ValueError as exc:
        raise BundleError(d, str(exc)) from exc


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    classes: list[int]
    support: list[tuple[int, int]]  # (sample index, class id)
    query: list[tuple[int, int]]


def make_episodes(bundle: DatasetBundle, way: int, shot: int, query: int, episodes: int,
                  seed: int, split: str = "unseen") -> list[Episode]:
    """Sample N-way K-shot episodes from the classes of ``split``."""
    pool = bundle.classes.ids_in(split)
    if way > len(pool):
        raise EpisodeError(f"{way}-way episodes need {way} {split} classes, bundle has {len(pool)}")
    per_class = {c: [] for c in pool}
    for i, s in enumerate(bundle.samples):
        if s.class_id in per_class:
            per_class[s.class_id].append(i)
    for c, idx in per_class.items():
        if len(idx) < shot + query:
            raise EpisodeError(f"class {c} has {len(idx)} samples, needs shot+query={shot + query}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(episodes):
        chosen = sorted(int(c) for c in rng.choice(pool, size=way, replace=False))
        sup, qry = [], []
        for c in chosen:
            pick = rng.choice(per_class[c], size=shot + query, replace=False)
            sup += [(int(i), c) for i in pick[:shot]]
            qry += [(int(i), c) for i in pick[shot:]]
        out.append(Episode(chosen, sup, qry))
    return out
