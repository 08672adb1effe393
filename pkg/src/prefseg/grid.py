"""Mask and likelihood arithmetic on dense pixel grids.

Every preference objective in this package is built from three things defined
here: IoU between masks, the disagreement region of a mask pair, and the
per-pixel averaged log-likelihood of a mask under a logit map.

Logit maps are plain ``(C, H, W)`` float arrays. Masks are wrapped in
:class:`Mask` so that the multi-class / multi-label interpretation travels with
the labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "PixelDomain",
    "Mask",
    "DisagreementRegion",
    "ShapeError",
    "DegeneratePairError",
    "check_logits",
    "iou",
    "pixel_log_likelihood",
    "log_likelihood",
    "disagreement_region",
    "pixel_log_ratio",
    "delta_pair",
]


class ShapeError(ValueError):
    """Masks or logits do not live on the same domain / mode."""


class DegeneratePairError(ValueError):
    """A pair has an empty disagreement region where one is required."""


@dataclass(frozen=True)
class PixelDomain:
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"domain must be non-empty, got {self.height}x{self.width}")

    @property
    def size(self) -> int:
        return self.height * self.width


@dataclass(frozen=True, eq=False)
class Mask:
    """A hard segmentation.

    ``labels`` is ``(H, W)`` integer class ids for multi-class masks (class 0 is
    background), or ``(H, W, C)`` bits for multi-label masks.
    """

    labels: np.ndarray
    num_classes: int
    multilabel: bool = False

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if self.multilabel:
            if lab.ndim != 3 or lab.shape[2] != self.num_classes:
                raise ShapeError(f"multi-label mask must be HxWx{self.num_classes}, got {lab.shape}")
            if lab.size and (lab.min() < 0 or lab.max() > 1):
                raise ValueError("multi-label mask entries must be 0/1")
            lab = lab.astype(np.uint8, copy=False)
        else:
            if lab.ndim != 2:
                raise ShapeError(f"multi-class mask must be HxW, got {lab.shape}")
            if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
                raise ValueError(f"class ids must lie in 0..{self.num_classes - 1}")
            lab = lab.astype(np.int64, copy=False)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        PixelDomain(lab.shape[0], lab.shape[1])

    @property
    def domain(self) -> PixelDomain:
        return PixelDomain(self.labels.shape[0], self.labels.shape[1])

    def binary(self, class_index: int) -> np.ndarray:
        """Boolean ``(H, W)`` foreground of one class."""
        if self.multilabel:
            return self.labels[:, :, class_index].astype(bool)
        return self.labels == class_index

    def foreground_classes(self) -> range:
        return range(self.num_classes) if self.multilabel else range(1, self.num_classes)

    def same_as(self, other: "Mask") -> bool:
        return (
            self.multilabel == other.multilabel
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
        )

    def tobytes(self) -> bytes:
        return self.labels.tobytes()


@dataclass(frozen=True)
class DisagreementRegion:
    """Pixels where two masks differ, as row/column index arrays in row-major order."""

    rows: np.ndarray
    cols: np.ndarray
    domain: PixelDomain
    class_index: Optional[int] = None

    @property
    def size(self) -> int:
        return int(self.rows.size)

    @property
    def fraction(self) -> float:
        return self.size / self.domain.size

    def as_mask(self) -> np.ndarray:
        out = np.zeros((self.domain.height, self.domain.width), dtype=bool)
        out[self.rows, self.cols] = True
        return out


def _check_pair(a: Mask, b: Mask) -> None:
    if a.multilabel != b.multilabel or a.num_classes != b.num_classes:
        raise ShapeError("masks differ in mode or number of classes")
    if a.labels.shape != b.labels.shape:
        raise ShapeError(f"mask shapes differ: {a.labels.shape} vs {b.labels.shape}")


def check_logits(z: np.ndarray, mask: Optional[Mask] = None) -> np.ndarray:
    """Validate a ``(C, H, W)`` logit map and return it as float64."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"logits must be CxHxW, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("logits contain NaN or Inf")
    if mask is not None:
        if z.shape[0] != mask.num_classes or z.shape[1:] != mask.labels.shape[:2]:
            raise ShapeError(
                f"logits {z.shape} incompatible with mask {mask.labels.shape} (C={mask.num_classes})"
            )
    return z


def _binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou(a: Mask, b: Mask, class_index: Optional[int] = None) -> float:
    """Intersection over union of two masks.

    With ``class_index`` the IoU of that one class is returned. Otherwise IoU
    is averaged over foreground classes present in either mask (background is
    never scored in multi-class mode). Two empty foregrounds score 1.0.
    """
    _check_pair(a, b)
    if class_index is not None:
        return _binary_iou(a.binary(class_index), b.binary(class_index))
    scores = []
    for c in a.foreground_classes():
        fa, fb = a.binary(c), b.binary(c)
        if fa.any() or fb.any():
            scores.append(_binary_iou(fa, fb))
    if not scores:
        return 1.0
    return float(np.mean(scores))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    # z: (C, N); stabilized along the class axis
    zmax = z.max(axis=0, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def _bernoulli_log_likelihood(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # log sigmoid(z) = -softplus(-z); log(1 - sigmoid(z)) = -softplus(z)
    return -np.logaddexp(0.0, np.where(y, -z, z))


def pixel_log_likelihood(z: np.ndarray, y: Mask, class_index: Optional[int] = None) -> np.ndarray:
    """Per-pixel log-likelihood ``(H, W)`` of mask ``y`` under logits ``z``."""
    z = check_logits(z, y)
    C, H, W = z.shape
    if y.multilabel:
        if class_index is None:
            raise ValueError("multi-label likelihood needs a class_index")
        return _bernoulli_log_likelihood(z[class_index], y.binary(class_index))
    logp = _log_softmax(z.reshape(C, -1))
    idx = y.labels.reshape(-1)
    return logp[idx, np.arange(idx.size)].reshape(H, W)


def log_likelihood(z: np.ndarray, y: Mask, class_index: Optional[int] = None) -> float:
    """Per-pixel averaged log-likelihood of ``y`` (always <= 0)."""
    ll = pixel_log_likelihood(z, y, class_index)
    return float(ll.sum(dtype=np.float64) / ll.size)


def disagreement_region(
    y_plus: Mask, y_minus: Mask, class_index: Optional[int] = None
) -> DisagreementRegion:
    """Pixels where the two masks differ.

    For multi-label masks a ``class_index`` restricts the comparison to that
    channel; without it a pixel counts if any channel differs.
    """
    _check_pair(y_plus, y_minus)
    if y_plus.multilabel:
        if class_index is None:
            diff = np.any(y_plus.labels != y_minus.labels, axis=2)
        else:
            diff = y_plus.labels[:, :, class_index] != y_minus.labels[:, :, class_index]
    else:
        if class_index is not None:
            diff = y_plus.binary(class_index) != y_minus.binary(class_index)
        else:
            diff = y_plus.labels != y_minus.labels
    rows, cols = np.nonzero(diff)
    return DisagreementRegion(rows, cols, y_plus.domain, class_index)


def pixel_log_ratio(
    z: np.ndarray,
    y_plus: Mask,
    y_minus: Mask,
    region: DisagreementRegion,
    class_index: Optional[int] = None,
) -> np.ndarray:
    """``l(y+_i) - l(y-_i)`` for the pixels of ``region`` only (1-D, row-major)."""
    z = check_logits(z, y_plus)
    r, c = region.rows, region.cols
    if y_plus.multilabel:
        if class_index is None:
            raise ValueError("multi-label log-ratio needs a class_index")
        zr = z[class_index, r, c]
        yp = y_plus.labels[r, c, class_index].astype(bool)
        ym = y_minus.labels[r, c, class_index].astype(bool)
        return _bernoulli_log_likelihood(zr, yp) - _bernoulli_log_likelihood(zr, ym)
    zr = z[:, r, c]
    logp = _log_softmax(zr)
    cols = np.arange(region.size)
    return logp[y_plus.labels[r, c], cols] - logp[y_minus.labels[r, c], cols]


def delta_pair(
    z: np.ndarray,
    y_plus: Mask,
    y_minus: Mask,
    normalization: str = "global",
    class_index: Optional[int] = None,
) -> float:
    """Log-likelihood ratio of ``y_plus`` over ``y_minus``.

    Only disagreement pixels are summed, so agreement pixels contribute exactly
    zero. ``normalization="global"`` divides by the number of pixels in the
    image, ``"region"`` by the size of the disagreement region.
    """
    if normalization not in ("global", "region"):
        raise ValueError(f"unknown normalization {normalization!r}")
    if y_plus.multilabel and class_index is None:
        raise ValueError("multi-label delta needs a class_index")
    region = disagreement_region(y_plus, y_minus, class_index)
    if region.size == 0:
        if normalization == "region":
            raise DegeneratePairError("empty disagreement region")
        check_logits(z, y_plus)
        return 0.0
    total = float(pixel_log_ratio(z, y_plus, y_minus, region, class_index).sum(dtype=np.float64))
    denom = region.domain.size if normalization == "global" else region.size
    return total / denom
