"""Oracle-side analysis of judges and preference updates.

Everything here uses ground truth and is for analysis only; nothing feeds back
into training. Slate-level judge metrics are accumulated with
:class:`fractions.Fraction` so the algebraic identities between them hold
exactly, not just to rounding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "PairRecord",
    "SlateRecord",
    "DiagnosticsRecord",
    "harmful_mass",
    "normalize_series",
    "least_squares_slope",
    "slate_metrics",
    "judge_diagnostics",
]


@dataclass(frozen=True)
class PairRecord:
    """Oracle view of one mined pair: ``m(y+)``, ``m(y-)`` and the update weight."""

    oracle_plus: float
    oracle_minus: float
    weight: float
    image_id: str = ""

    @property
    def margin(self) -> float:
        return self.oracle_plus - self.oracle_minus


@dataclass(frozen=True)
class SlateRecord:
    """Oracle IoU of every proposal in a slate and the judge's pick.

    Proposal 0 is the base prediction.
    """

    oracle: tuple
    top: int
    image_id: str = ""


def _frac(x) -> Fraction:
    return Fraction(float(x))


def harmful_mass(pairs: Iterable) -> Optional[float]:
    """Mean of ``1[margin < 0] * (-margin) * w`` over mined pairs, ``None`` if empty.

    Items are :class:`PairRecord` or ``(m_plus, m_minus, w)`` tuples.
    """
    total = Fraction(0)
    n = 0
    for p in pairs:
        if not isinstance(p, PairRecord):
            p = PairRecord(*p)
        d = _frac(p.oracle_plus) - _frac(p.oracle_minus)
        if d < 0:
            total += -d * _frac(p.weight)
        n += 1
    if n == 0:
        return None
    return float(total / n)


def normalize_series(series: Sequence, head: int = 3) -> list:
    """Divide by the mean of the first ``head`` defined values.

    Missing entries stay ``None``; if the baseline is zero or unavailable the
    whole series is ``None``.
    """
    defined = [v for v in series if v is not None]
    base = defined[:head]
    if len(base) < head or sum(base) == 0:
        return [None] * len(series)
    ref = sum(base) / head
    return [None if v is None else v / ref for v in series]


def least_squares_slope(series: Sequence) -> Optional[float]:
    """OLS slope of the defined values against their epoch index."""
    pts = [(i, v) for i, v in enumerate(series) if v is not None]
    if len(pts) < 2:
        return None
    x = np.array([p[0] for p in pts], dtype=np.float64)
    y = np.array([p[1] for p in pts], dtype=np.float64)
    x -= x.mean()
    return float((x * (y - y.mean())).sum() / (x * x).sum())


def slate_metrics(record: SlateRecord) -> dict:
    """Exact per-slate metrics as fractions.

    ``harm_top`` is 0/1, ``harm_mag = max(0, m(base) - m(top))``,
    ``headroom = m(top) - m(base)``, ``regret = m(best) - m(top)`` and
    ``oracle_gap = m(best) - m(base)``.
    """
    m = [_frac(v) for v in record.oracle]
    base, top, best = m[0], m[record.top], max(m)
    return {
        "harm_top": Fraction(int(top < base)),
        "harm_mag": max(Fraction(0), base - top),
        "headroom": top - base,
        "regret": best - top,
        "oracle_gap": best - base,
    }


@dataclass
class DiagnosticsRecord:
    harm_top: Optional[float] = None
    harm_mag: Optional[float] = None
    headroom: Optional[float] = None
    regret: Optional[float] = None
    pair_flip: Optional[float] = None
    n_slates: int = 0
    n_pairs: int = 0
    harm_series: list = field(default_factory=list)
    harm_normalized: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def judge_diagnostics(slates: Sequence[SlateRecord], pairs: Sequence = (), harm_series: Sequence = ()) -> DiagnosticsRecord:
    """Average the slate metrics over a split and the flip rate over mined pairs.

    ``pairs`` holds :class:`PairRecord` items (or ``(m_plus, m_minus)``
    tuples); ``PairFlip`` is the fraction with a negative oracle margin.
    """
    rec = DiagnosticsRecord(n_slates=len(slates), n_pairs=len(pairs))
    if slates:
        acc = {k: Fraction(0) for k in ("harm_top", "harm_mag", "headroom", "regret")}
        for s in slates:
            per = slate_metrics(s)
            for k in acc:
                acc[k] += per[k]
        for k, v in acc.items():
            setattr(rec, k, float(v / len(slates)))
    if pairs:
        flips = 0
        for p in pairs:
            plus, minus = (p.oracle_plus, p.oracle_minus) if isinstance(p, PairRecord) else (p[0], p[1])
            flips += _frac(plus) < _frac(minus)
        rec.pair_flip = flips / len(pairs)
    rec.harm_series = list(harm_series)
    rec.harm_normalized = normalize_series(rec.harm_series)
    return rec
