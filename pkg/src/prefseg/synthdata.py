"""Synthetic segmentation datasets and the PSMP sample file format.

Two families stand in for real medical data:

* ``multiclass``: a disk inside a ring with a neighbouring ellipse, mutually
  exclusive labels (background 0, ellipse 1, ring 2, disk 3).
* ``multilabel``: a large ellipse, a medium ellipse and a thin bar that may
  overlap each other, one bit per structure.

Images are a per-structure intensity model plus a smooth bias field, unlabeled
bright distractor blobs and additive Gaussian noise. Every sample is a pure
function of ``(spec, split, index)``.

PSMP layout (little-endian)::

    magic   4s   b"PSMP"
    version u32  1
    mode    u8   0 = multi-class, 1 = multi-label
    C       u16
    H       u32
    W       u32
    Cin     u16
    image   f32[H*W*Cin]   row-major (H, W, Cin)
    mask    u8[H*W]        multi-class labels, or
            u8[C * ceil(H*W/8)]   multi-label, one MSB-first bit plane per class
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import Mask
from .errors import ConfigError, FormatError

__all__ = [
    "ConfigError",
    "DatasetSpec",
    "Sample",
    "Dataset",
    "generate",
    "generate_sample",
    "write_sample",
    "read_sample",
    "sample_to_bytes",
    "sample_from_bytes",
    "write_dataset",
    "read_dataset",
]

MAGIC = b"PSMP"
VERSION = 1
SPLITS = ("train", "val", "test", "qc")


@dataclass(frozen=True)
class DatasetSpec:
    mode: str = "multiclass"
    num_classes: int = 4
    height: int = 48
    width: int = 48
    counts: dict = field(default_factory=lambda: {"train": 200, "val": 40, "test": 40, "qc": 20})
    noise: float = 0.3
    bias_field: float = 0.15
    max_distractors: int = 2
    # multiclass geometry (pixels)
    inner_radius: tuple = (4.0, 7.0)
    ring_width: tuple = (2.0, 4.0)
    side_axes: tuple = (4.0, 8.0)
    # multilabel geometry (pixels)
    large_axes: tuple = (12.0, 18.0)
    medium_axes: tuple = (5.0, 9.0)
    bar_length: tuple = (14.0, 24.0)
    bar_width: tuple = (1.5, 3.0)
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("multiclass", "multilabel"):
            raise ConfigError(f"mode must be 'multiclass' or 'multilabel', got {self.mode!r}")
        expected = 4 if self.mode == "multiclass" else 3
        if self.num_classes != expected:
            raise ConfigError(f"{self.mode} datasets have num_classes={expected}")
        if self.height % 4 or self.width % 4 or self.height < 16 or self.width < 16:
            raise ConfigError("image sides must be multiples of 4 and at least 16")
        if set(self.counts) != set(SPLITS) or any(int(v) < 0 for v in self.counts.values()):
            raise ConfigError(f"counts must give a non-negative size for each of {SPLITS}")
        if self.noise < 0 or self.bias_field < 0 or self.max_distractors < 0:
            raise ConfigError("noise, bias_field and max_distractors must be non-negative")
        for name in ("inner_radius", "ring_width", "side_axes", "large_axes", "medium_axes", "bar_length", "bar_width"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        half = min(self.height, self.width) / 2
        if self.mode == "multiclass":
            outer = self.inner_radius[1] + self.ring_width[1]
            if outer + 2 * self.side_axes[1] > 2 * half - 2:
                raise ConfigError("multiclass structures cannot fit in the image")
        elif self.large_axes[1] > half - 1:
            raise ConfigError("large_axes exceed the image half-size")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        kw = dict(d)
        for k, v in kw.items():
            if isinstance(v, list):
                kw[k] = tuple(v)
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # (H, W, Cin) float32
    mask: Mask
    sample_id: str

    def equals(self, other: "Sample") -> bool:
        return (
            self.image.dtype == other.image.dtype
            and self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
            and self.mask.same_as(other.mask)
        )


@dataclass
class Dataset:
    spec: DatasetSpec
    splits: dict  # split name -> list[Sample]

    def __getitem__(self, split: str) -> list:
        return self.splits[split]

    @property
    def multilabel(self) -> bool:
        return self.spec.mode == "multilabel"

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


# ---------------------------------------------------------------------------
# rasterization


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy, xx


def _ellipse(yy, xx, cy, cx, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _bar(yy, xx, cy, cx, length, width, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)


def _bias(yy, xx, rng, amplitude, h, w):
    gy, gx = rng.uniform(-1, 1, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    return amplitude * (0.5 * (gy * (yy / h - 0.5) + gx * (xx / w - 0.5)) + 0.5 * np.sin(2 * np.pi * yy / h + phase))


def _distractors(yy, xx, rng, spec, avoid):
    out = np.zeros(yy.shape, dtype=bool)
    for _ in range(int(rng.integers(0, spec.max_distractors + 1))):
        r = rng.uniform(1.5, 3.0)
        cy = rng.uniform(r, spec.height - r)
        cx = rng.uniform(r, spec.width - r)
        out |= _ellipse(yy, xx, cy, cx, r, r, 0.0)
    return out & ~avoid


def _render_multiclass(spec, rng):
    h, w = spec.height, spec.width
    yy, xx = _grid(h, w)
    r_in = rng.uniform(*spec.inner_radius)
    r_out = r_in + rng.uniform(*spec.ring_width)
    a = rng.uniform(*spec.side_axes)
    b = rng.uniform(spec.side_axes[0] * 0.6, a)
    margin = r_out + 1
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    dist = np.hypot(yy - cy, xx - cx)
    labels = np.zeros((h, w), dtype=np.int64)
    # the side ellipse hugs the ring at a random angle
    ang = rng.uniform(0, 2 * np.pi)
    d = r_out + 0.7 * b
    sy = np.clip(cy + d * np.sin(ang), 0, h - 1)
    sx = np.clip(cx + d * np.cos(ang), 0, w - 1)
    labels[_ellipse(yy, xx, sy, sx, a, b, ang + np.pi / 2)] = 1
    labels[dist <= r_out] = 2
    labels[dist <= r_in] = 3
    intensity = np.array([0.2, 0.7, 0.4, 0.95])
    clean = intensity[labels]
    clean = clean + _bias(yy, xx, rng, spec.bias_field, h, w)
    clean[_distractors(yy, xx, rng, spec, labels > 0)] += 0.6
    return clean, labels


def _render_multilabel(spec, rng):
    h, w = spec.height, spec.width
    yy, xx = _grid(h, w)
    labels = np.zeros((h, w, 3), dtype=np.uint8)
    a = rng.uniform(*spec.large_axes)
    b = rng.uniform(0.55 * a, 0.8 * a)
    cy = rng.uniform(h / 2 - 3, h / 2 + 3)
    cx = rng.uniform(w / 2 - 3, w / 2 + 3)
    th = rng.uniform(-0.3, 0.3)
    labels[..., 0] = _ellipse(yy, xx, cy, cx, b, a, th)
    ma = rng.uniform(*spec.medium_axes)
    mb = rng.uniform(0.6 * ma, ma)
    my = cy + rng.uniform(0.2, 0.6) * a
    mx = cx + rng.uniform(-0.4, 0.4) * b
    labels[..., 1] = _ellipse(yy, xx, my, mx, ma, mb, rng.uniform(0, np.pi))
    length = rng.uniform(*spec.bar_length)
    width = rng.uniform(*spec.bar_width)
    by = cy - rng.uniform(0.4, 0.8) * a
    bx = cx + rng.uniform(-0.3, 0.3) * b
    labels[..., 2] = _bar(yy, xx, by, bx, length, width, rng.uniform(-0.4, 0.4))
    clean = 0.55 - 0.3 * labels[..., 0] + 0.35 * labels[..., 1] + 0.45 * labels[..., 2]
    clean = clean + _bias(yy, xx, rng, spec.bias_field, h, w)
    clean[_distractors(yy, xx, rng, spec, labels.any(axis=2))] += 0.45
    return clean, labels


def _split_seed(spec: DatasetSpec, split: str, index: int, stream: int):
    return np.random.SeedSequence([spec.seed, SPLITS.index(split), index, stream])


def generate_sample(spec: DatasetSpec, split: str, index: int, with_clean: bool = False):
    """One sample. ``with_clean=True`` also returns the noise-free image."""
    geom = np.random.default_rng(_split_seed(spec, split, index, 0))
    noise = np.random.default_rng(_split_seed(spec, split, index, 1))
    if spec.mode == "multiclass":
        clean, labels = _render_multiclass(spec, geom)
        mask = Mask(labels, spec.num_classes, multilabel=False)
    else:
        clean, labels = _render_multilabel(spec, geom)
        mask = Mask(labels, spec.num_classes, multilabel=True)
    clean = clean[:, :, None]
    image = (clean + spec.noise * noise.standard_normal(clean.shape)).astype(np.float32)
    sample = Sample(image, mask, f"{split}-{index:05d}")
    if with_clean:
        return sample, clean.astype(np.float32)
    return sample


def generate(spec: DatasetSpec) -> Dataset:
    """All splits of a dataset; a pure function of ``spec``."""
    spec.validate()
    splits = {s: [generate_sample(spec, s, i) for i in range(int(spec.counts[s]))] for s in SPLITS}
    return Dataset(spec, splits)


# ---------------------------------------------------------------------------
# PSMP format

_HEADER = struct.Struct("<4sIBHIIH")


def sample_to_bytes(sample: Sample) -> bytes:
    img = np.asarray(sample.image)
    if img.ndim != 3:
        raise ValueError("sample image must be HxWxCin")
    h, w, cin = img.shape
    m = sample.mask
    head = _HEADER.pack(MAGIC, VERSION, int(m.multilabel), m.num_classes, h, w, cin)
    body = np.ascontiguousarray(img, dtype="<f4").tobytes()
    if m.multilabel:
        planes = [np.packbits(m.labels[:, :, c].reshape(-1).astype(np.uint8)) for c in range(m.num_classes)]
        tail = b"".join(p.tobytes() for p in planes)
    else:
        if m.num_classes > 256:
            raise ValueError("multi-class PSMP masks hold at most 256 classes")
        tail = m.labels.astype(np.uint8).tobytes()
    return head + body + tail


def sample_from_bytes(buf: bytes, sample_id: str = "") -> Sample:
    if len(buf) < 4:
        raise FormatError("truncated file while reading magic", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, mode, C, h, w, cin = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported PSMP version {version}", 4)
    if mode not in (0, 1):
        raise FormatError(f"unknown mask mode {mode}", 8)
    if h == 0 or w == 0 or cin == 0 or C == 0:
        raise FormatError("zero-sized dimension", 9)
    pos = _HEADER.size
    n_img = h * w * cin * 4
    if len(buf) < pos + n_img:
        raise FormatError("truncated image data", len(buf))
    image = np.frombuffer(buf, dtype="<f4", count=h * w * cin, offset=pos).reshape(h, w, cin).astype(np.float32)
    pos += n_img
    if mode == 1:
        plane = (h * w + 7) // 8
        need = C * plane
        if len(buf) < pos + need:
            raise FormatError("truncated mask data", len(buf))
        labels = np.empty((h, w, C), dtype=np.uint8)
        for c in range(C):
            bits = np.frombuffer(buf, dtype=np.uint8, count=plane, offset=pos + c * plane)
            labels[:, :, c] = np.unpackbits(bits)[: h * w].reshape(h, w)
    else:
        need = h * w
        if len(buf) < pos + need:
            raise FormatError("truncated mask data", len(buf))
        labels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w).astype(np.int64)
        if labels.max(initial=0) >= C:
            raise FormatError(f"mask label {labels.max()} out of range for C={C}", pos)
    pos += need
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return Sample(image, Mask(labels, C, multilabel=bool(mode)), sample_id)


def write_sample(sample: Sample, path) -> None:
    Path(path).write_bytes(sample_to_bytes(sample))


def read_sample(path) -> Sample:
    path = Path(path)
    return sample_from_bytes(path.read_bytes(), path.stem)


def write_dataset(dataset: Dataset, directory) -> Path:
    """Write every sample as ``samples/<id>.psmp`` plus ``manifest.json``."""
    root = Path(directory)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    manifest = {"format": "PSMP", "version": VERSION, "spec": dataset.spec.to_dict(), "splits": {}}
    for split, samples in dataset.splits.items():
        manifest["splits"][split] = [s.sample_id for s in samples]
        for s in samples:
            write_sample(s, root / "samples" / f"{s.sample_id}.psmp")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = DatasetSpec.from_dict(manifest["spec"])
    splits = {
        split: [read_sample(root / "samples" / f"{sid}.psmp") for sid in ids]
        for split, ids in manifest["splits"].items()
    }
    return Dataset(spec, splits)
