"""Slate scoring by quality-control judges and the induced ranking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .grid import Mask, iou
from .model import SegmenterParams, forward
from .proposals import FOUR, Slate, base_prediction

__all__ = [
    "MissingLabelError",
    "JudgeSpec",
    "judge_predictions",
    "score_slate",
    "rank_slate",
    "is_informative",
    "IoURegressor",
    "MIN_SCORE_GAP",
]

MIN_SCORE_GAP = 1e-4
# absorbs decimal representation error, e.g. 0.5001 - 0.5 < 1e-4 in binary
_GAP_SLACK = 1e-12

KINDS = ("model", "ensemble", "oracle", "regressor")


class MissingLabelError(ValueError):
    """The oracle judge was asked to score without a ground-truth mask."""


@dataclass
class JudgeSpec:
    kind: str
    params: Optional[SegmenterParams] = None
    members: Sequence[SegmenterParams] = field(default_factory=list)
    regressor: Optional[Callable] = None
    n_qc: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown judge kind {self.kind!r}")
        if self.kind == "model" and self.params is None:
            raise ValueError("model judge needs params")
        if self.kind == "ensemble" and len(self.members) < 2:
            raise ValueError("ensemble judge needs at least two members")
        if self.kind == "regressor" and self.regressor is None:
            raise ValueError("regressor judge needs a scoring function")


def judge_predictions(spec: JudgeSpec, image, multilabel: bool) -> list:
    """The judge's own predicted masks for one image (empty for oracle/regressor)."""
    if spec.kind == "model":
        return [base_prediction(forward(spec.params, image), multilabel)]
    if spec.kind == "ensemble":
        return [base_prediction(forward(m, image), multilabel) for m in spec.members]
    return []


def score_slate(
    spec: JudgeSpec,
    image,
    slate: Slate,
    ground_truth: Optional[Mask] = None,
    predictions: Optional[list] = None,
) -> np.ndarray:
    """One score per proposal, in slate order.

    ``model`` and ``ensemble`` judges score by (mean) IoU against their own
    predictions, which are computed once per call unless ``predictions`` is
    given; ``oracle`` scores by IoU against ``ground_truth``; ``regressor``
    returns its output clamped to ``[0, 1]``.
    """
    if spec.kind == "oracle":
        if ground_truth is None:
            raise MissingLabelError("oracle judge needs a ground-truth mask")
        return np.array([iou(m, ground_truth) for m in slate.masks])
    if spec.kind == "regressor":
        return np.clip(np.array([float(spec.regressor(image, m)) for m in slate.masks]), 0.0, 1.0)
    if predictions is None:
        predictions = judge_predictions(spec, image, slate.anchor.multilabel)
    return np.array([np.mean([iou(m, p) for p in predictions]) for m in slate.masks])


def rank_slate(scores) -> np.ndarray:
    """Indices best-first; ties keep slate order, so the anchor wins ties."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def is_informative(top_score: float, other_score: float, all_scores=None) -> bool:
    """True iff the two scores differ by at least ``1e-4`` and the slate is not all zeros."""
    if all_scores is not None and not np.any(np.asarray(all_scores) != 0):
        return False
    return abs(top_score - other_score) >= MIN_SCORE_GAP - _GAP_SLACK


# ---------------------------------------------------------------------------
# learned IoU regressor


def mask_features(image, mask: Mask) -> np.ndarray:
    """Hand-crafted per-class descriptors of a proposal given its image."""
    x = np.asarray(image, dtype=np.float64)[..., 0]
    feats = []
    n = x.size
    for c in mask.foreground_classes():
        fg = mask.binary(c)
        area = fg.sum()
        if area:
            inside = x[fg].mean()
            spread = x[fg].std()
        else:
            inside = spread = 0.0
        outside = x[~fg].mean() if area < n else 0.0
        _, ncomp = ndimage.label(fg, structure=FOUR)
        edge = np.count_nonzero(fg ^ ndimage.binary_erosion(fg, structure=FOUR))
        feats += [
            area / n,
            np.sqrt(area / n),
            inside,
            spread,
            inside - outside,
            np.log1p(ncomp),
            edge / max(area, 1),
        ]
    return np.array(feats)


@dataclass
class IoURegressor:
    """Ridge regression from :func:`mask_features` to oracle IoU."""

    weights: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    ridge: float = 1e-2

    def fit(self, images: Sequence, masks: Sequence[Mask], targets: Sequence[float]) -> "IoURegressor":
        X = np.stack([mask_features(im, m) for im, m in zip(images, masks)])
        y = np.asarray(targets, dtype=np.float64)
        self.mean = X.mean(axis=0)
        self.scale = X.std(axis=0) + 1e-8
        Z = np.hstack([(X - self.mean) / self.scale, np.ones((len(X), 1))])
        A = Z.T @ Z + self.ridge * len(X) * np.eye(Z.shape[1])
        A[-1, -1] -= self.ridge * len(X)  # leave the intercept unpenalized
        self.weights = np.linalg.solve(A, Z.T @ y)
        return self

    def __call__(self, image, mask: Mask) -> float:
        if self.weights is None:
            raise RuntimeError("regressor is not fitted")
        z = (mask_features(image, mask) - self.mean) / self.scale
        return float(np.clip(z @ self.weights[:-1] + self.weights[-1], 0.0, 1.0))
