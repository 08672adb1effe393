"""Turn a scored, ranked slate into at most one preference pair."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import Mask, disagreement_region
from .judge import is_informative
from .proposals import Slate

__all__ = ["MinerSpec", "PreferencePair", "mine", "MINERS"]

MINERS = ("top_vs_base", "top_vs_random", "threshold", "random")
_TAU_SLACK = 1e-12


@dataclass(frozen=True)
class MinerSpec:
    kind: str = "top_vs_random"
    tau: float = 0.05

    def __post_init__(self):
        if self.kind not in MINERS:
            raise ValueError(f"unknown miner {self.kind!r}")
        if self.kind == "threshold" and not self.tau > 0:
            raise ValueError("threshold miner needs tau > 0")


@dataclass(frozen=True, eq=False)
class PreferencePair:
    image_id: str
    y_plus: Mask
    y_minus: Mask
    score_plus: float
    score_minus: float
    miner: str
    index_plus: int = -1
    index_minus: int = -1
    class_index: Optional[int] = None


def _choose(kind, ranking, scores, tau, rng):
    K = len(ranking)
    top = int(ranking[0])
    if kind == "top_vs_base":
        return top, 0
    if kind == "top_vs_random":
        return top, int(ranking[rng.integers(1, K)])
    if kind == "threshold":
        for idx in ranking[1:]:
            if scores[top] - scores[idx] >= tau - _TAU_SLACK:
                return top, int(idx)
        return None
    # random: y+ from any rank with something below it, y- strictly lower
    p = int(rng.integers(0, K - 1))
    q = int(rng.integers(p + 1, K))
    return int(ranking[p]), int(ranking[q])


def mine(spec: MinerSpec, slate: Slate, scores, ranking, seed=0) -> list:
    """Zero or one :class:`PreferencePair` for a slate.

    ``seed`` may be an int or any ``numpy`` seed entropy (e.g. a list). A
    candidate pair is dropped when its score gap is below ``1e-4``, the slate
    scores are all zero, or the two masks are identical.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ranking = np.asarray(ranking)
    if len(ranking) != slate.K or len(scores) != slate.K:
        raise ValueError("scores and ranking must cover the slate")
    if slate.K < 2:
        return []
    rng = np.random.default_rng(seed)
    pick = _choose(spec.kind, ranking, scores, spec.tau, rng)
    if pick is None:
        return []
    i, j = pick
    if i == j or scores[i] < scores[j]:
        return []
    if not is_informative(scores[i], scores[j], scores):
        return []
    y_plus, y_minus = slate.masks[i], slate.masks[j]
    if disagreement_region(y_plus, y_minus).size == 0:
        return []
    return [PreferencePair(slate.image_id, y_plus, y_minus, float(scores[i]), float(scores[j]), spec.kind, i, j)]
