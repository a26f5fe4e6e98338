"""Toy classification tasks, the labelled/soft dataset containers and their file format.

Dataset file layout (little-endian)::

    b"ESD1"
    u32 kind            0 = hard labels, 1 = soft labels
    u32 class_count
    u32 n
    u32 ndim, u32 * ndim     per-sample input shape
    i32 epoch_tag            -1 for hard-label sets
    u32 name_len, UTF-8 name
    u32 meta_len, UTF-8 JSON generation parameters
    float64 * n * prod(shape)    inputs
    int32 * n                    labels            (kind 0)
    float64 * n * class_count    soft labels       (kind 1)
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, DomainError, VersionMismatchError

MAGIC = b"ESD1"


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0:
            raise DomainError("dataset must hold at least one sample")
        if len(self.labels) != len(self.inputs):
            raise DomainError("inputs and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DomainError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx, name: str | None = None) -> LabeledDataset:
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.class_count,
                              name if name is not None else self.name, dict(self.meta))


@dataclass
class SoftDataset:
    """Inputs paired with oracle probability vectors for one stealing epoch."""

    inputs: np.ndarray
    soft_labels: np.ndarray | None = None
    epoch_tag: int = 0
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.soft_labels is not None:
            self.soft_labels = np.asarray(self.soft_labels, dtype=np.float64)
            if len(self.soft_labels) != len(self.inputs):
                raise DomainError("inputs and soft labels differ in length")
            if not np.allclose(self.soft_labels.sum(axis=1), 1.0, rtol=0, atol=1e-6):
                raise DomainError("soft-label rows must sum to 1 within 1e-6")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def blob_centers(k: int, dim: int, seed: int, scale: float = 0.5, offset: float = 0.0) -> np.ndarray:
    return offset + np.random.default_rng(seed).uniform(-scale, scale, (k, dim))


def _sample_blobs(centers: np.ndarray, n: int, spread: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = _balanced_labels(n, len(centers), rng)
    x = centers[labels] + spread * rng.standard_normal((n, centers.shape[1]))
    return np.clip(x, -1.0, 1.0), labels


def gen_blobs(k: int, dim: int, n: int, spread: float, seed: int, center_scale: float = 0.5,
              offset: float = 0.0) -> LabeledDataset:
    """``k`` Gaussian clusters in ``dim`` dimensions, clipped to [-1, 1].

    Cluster centres are drawn once from ``seed``, uniform in
    ``offset ± center_scale`` per coordinate; classes are balanced to within
    one sample.  A small ``center_scale`` with a nonzero ``offset`` packs the
    classes into a corner of the envelope that N(0, 1) noise rarely visits.
    """
    if k < 2 or n < k:
        raise DomainError("gen_blobs needs k >= 2 and n >= k")
    centers = blob_centers(k, dim, seed, center_scale, offset)
    rng = np.random.default_rng([seed, 1])
    x, y = _sample_blobs(centers, n, spread, rng)
    meta = {"generator": "blobs", "k": k, "dim": dim, "spread": spread, "seed": seed,
            "center_scale": center_scale, "offset": offset}
    return LabeledDataset(x, y, k, "blobs", meta)


# 8x8 glyphs for ten digit-like classes; '#' is ink.
_GLYPHS = [
    ["..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "...##...", "..####.."],
    ["..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######."],
    [".#####..", "......#.", "......#.", "..####..", "......#.", "......#.", "......#.", ".#####.."],
    [".....#..", "....##..", "...#.#..", "..#..#..", ".######.", ".....#..", ".....#..", ".....#.."],
    [".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."],
    ["..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."],
    ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "......#.", "..####.."],
]


def glyph_templates() -> np.ndarray:
    """Ten 8x8 templates with ink = 1 and background = 0."""
    return np.array([[[c == "#" for c in row] for row in g] for g in _GLYPHS], dtype=np.float64)


def _render_glyphs(templates: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                   distortion: float = 0.0) -> np.ndarray:
    n = len(labels)
    out = np.empty((n, 1, 8, 8))
    for i, lab in enumerate(labels):
        img = templates[lab]
        if distortion > 0:
            # rewrite a fraction of pixels toward a different glyph
            other = templates[rng.integers(len(templates))]
            mask = rng.random((8, 8)) < distortion
            img = np.where(mask, other, img)
        dy, dx = rng.integers(-1, 2, size=2)
        img = np.roll(img, (dy, dx), axis=(0, 1))
        ink = rng.uniform(0.7, 1.0)
        img = img * ink + 0.15 * rng.standard_normal((8, 8))
        out[i, 0] = np.clip(2.0 * img - 1.0, -1.0, 1.0)
    return out


def gen_digits_like(n: int, seed: int) -> LabeledDataset:
    """Ten-class 1x8x8 glyph images in [-1, 1] with jitter, ink variation and noise."""
    if n < 10:
        raise DomainError("gen_digits_like needs n >= 10")
    rng = np.random.default_rng([seed, 2])
    labels = _balanced_labels(n, 10, rng)
    x = _render_glyphs(glyph_templates(), labels, rng)
    return LabeledDataset(x, labels, 10, "digits", {"generator": "digits", "seed": seed})


def split(ds: LabeledDataset, n_test: int, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint (train, test) partition; the test part keeps class balance within one sample."""
    if not 0 < n_test < len(ds):
        raise DomainError("n_test must be between 1 and len(ds) - 1")
    rng = np.random.default_rng([seed, 3])
    order = np.argsort(ds.labels, kind="stable")
    per_class = [order[ds.labels[order] == c] for c in range(ds.class_count)]
    per_class = [rng.permutation(idx) for idx in per_class]
    # deal test indices round-robin over classes
    test_idx = []
    cursor = [0] * ds.class_count
    c = 0
    while len(test_idx) < n_test:
        if cursor[c] < len(per_class[c]):
            test_idx.append(per_class[c][cursor[c]])
            cursor[c] += 1
        c = (c + 1) % ds.class_count
    test_idx = np.sort(np.array(test_idx))
    mask = np.ones(len(ds), dtype=bool)
    mask[test_idx] = False
    return ds.subset(np.flatnonzero(mask), ds.name + "-train"), ds.subset(test_idx, ds.name + "-test")


def rotate_centers(centers: np.ndarray, angle: float, rng: np.random.Generator, origin: float = 0.0) -> np.ndarray:
    """Rotate each centre about ``origin`` by ``angle`` radians, within the plane
    its offset vector spans with a random orthogonal direction."""
    out = centers.copy()
    for i, c in enumerate(centers - origin):
        norm = np.linalg.norm(c)
        if norm == 0:
            continue
        u = c / norm
        r = rng.standard_normal(c.shape)
        r -= r.dot(u) * u
        r /= np.linalg.norm(r)
        out[i] = origin + norm * (np.cos(angle) * u + np.sin(angle) * r)
    return out


def make_auxiliary(base: LabeledDataset, shift: float, seed: int, n: int | None = None) -> LabeledDataset:
    """A distribution-shifted sibling of ``base`` standing in for a public auxiliary dataset.

    Blob tasks rotate every cluster centre by ``shift`` radians; glyph tasks
    replace a ``shift`` fraction of each glyph's pixels with another glyph.
    ``shift=0`` reproduces the base distribution parameters exactly.
    """
    gen = base.meta.get("generator")
    n = len(base) if n is None else n
    rng = np.random.default_rng([seed, 4])
    if gen == "blobs":
        m = base.meta
        offset = m.get("offset", 0.0)
        centers = blob_centers(m["k"], m["dim"], m["seed"], m["center_scale"], offset)
        shifted = rotate_centers(centers, shift, rng, offset) if shift else centers
        x, y = _sample_blobs(shifted, n, m["spread"], rng)
        meta = dict(m, shift=shift, aux_seed=seed)
        return LabeledDataset(x, y, m["k"], "blobs-aux", meta)
    if gen == "digits":
        labels = _balanced_labels(n, 10, rng)
        x = _render_glyphs(glyph_templates(), labels, rng, distortion=float(shift))
        return LabeledDataset(x, labels, 10, "digits-aux", dict(base.meta, shift=shift, aux_seed=seed))
    raise DomainError(f"cannot derive an auxiliary set from generator {gen!r}")


def auxiliary_centers(base: LabeledDataset, shift: float, seed: int) -> np.ndarray:
    """Cluster centres that :func:`make_auxiliary` would sample a blob auxiliary set from."""
    m = base.meta
    offset = m.get("offset", 0.0)
    centers = blob_centers(m["k"], m["dim"], m["seed"], m["center_scale"], offset)
    if not shift:
        return centers
    return rotate_centers(centers, shift, np.random.default_rng([seed, 4]), offset)


# -- file format -----------------------------------------------------------------


def _dataset_bytes(ds: LabeledDataset | SoftDataset) -> bytes:
    soft = isinstance(ds, SoftDataset)
    if soft and ds.soft_labels is None:
        k = 0
    else:
        k = ds.soft_labels.shape[1] if soft else ds.class_count
    shape = ds.input_shape
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", int(soft), k, len(ds)))
    buf.write(struct.pack("<I", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(struct.pack("<i", ds.epoch_tag if soft else -1))
    name = ds.name.encode()
    buf.write(struct.pack("<I", len(name)))
    buf.write(name)
    meta = json.dumps({} if soft else ds.meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
    if soft:
        if ds.soft_labels is not None:
            buf.write(np.ascontiguousarray(ds.soft_labels, dtype="<f8").tobytes())
    else:
        buf.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
    return buf.getvalue()


def save_dataset(ds: LabeledDataset | SoftDataset, path) -> None:
    Path(path).write_bytes(_dataset_bytes(ds))


def load_dataset(path) -> LabeledDataset | SoftDataset:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFileError(f"cannot read dataset {path}: {exc}") from exc
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CorruptFileError("dataset file is truncated")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    magic = take(4) if len(data) >= 4 else b""
    if magic != MAGIC:
        if magic[:3] == MAGIC[:3]:
            raise VersionMismatchError(f"unsupported dataset version {magic[3:]!r}")
        raise CorruptFileError("not an eslab dataset (bad magic)")
    kind, k, n = struct.unpack("<III", take(12))
    (ndim,) = struct.unpack("<I", take(4))
    shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
    (epoch_tag,) = struct.unpack("<i", take(4))
    (name_len,) = struct.unpack("<I", take(4))
    name = take(name_len).decode()
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode())
    count = n * int(np.prod(shape))
    inputs = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape((n,) + tuple(shape))
    if kind == 1:
        soft = None
        if k:
            soft = np.frombuffer(take(8 * n * k), dtype="<f8").astype(np.float64).reshape(n, k)
        out = SoftDataset(inputs, soft, epoch_tag, name)
    elif kind == 0:
        labels = np.frombuffer(take(4 * n), dtype="<i4").astype(np.int64)
        out = LabeledDataset(inputs, labels, k, name, meta)
    else:
        raise CorruptFileError(f"unknown dataset kind {kind}")
    if pos != len(data):
        raise CorruptFileError("trailing bytes after dataset payload")
    return out


def export_csv(ds: LabeledDataset | SoftDataset, path) -> None:
    """One row per sample: flattened input values, then the label (or soft-label columns)."""
    flat = ds.inputs.reshape(len(ds), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if isinstance(ds, LabeledDataset):
            writer.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
            for row, lab in zip(flat, ds.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(lab)])
        else:
            k = 0 if ds.soft_labels is None else ds.soft_labels.shape[1]
            writer.writerow([f"x{i}" for i in range(flat.shape[1])] + [f"y{j}" for j in range(k)])
            for i, row in enumerate(flat):
                tail = [] if ds.soft_labels is None else [repr(float(v)) for v in ds.soft_labels[i]]
                writer.writerow([repr(float(v)) for v in row] + tail)
