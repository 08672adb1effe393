"""Preference objectives on segmentation logits and their analytic gradients.

All objectives act on ``x = Delta_policy - Delta_ref``, where each ``Delta`` is
the log-likelihood ratio of the preferred over the rejected mask, summed over
the disagreement region only:

* ``dpo``    ``-log sigmoid(beta * x)`` with ``Delta`` divided by the image size.
* ``rn_dpo`` the same loss with ``Delta`` divided by the disagreement size.
* ``ipo``    ``(x - 1 / (2 * ipo_tau))**2`` with image-size normalization.
* ``rdpo``   ``((1 - eps) * l(x) - eps * l(-x)) / (1 - 2 * eps)`` where ``l``
  is the DPO loss, image-size normalization.

For multi-label masks every class with a non-empty disagreement region is a
separate term and the terms are averaged.

Per disagreement pixel, the log-ratio's derivative with respect to the logits
is ``onehot(y+) - onehot(y-)`` (softmax) or ``y+ - y-`` (sigmoid): the
partition terms cancel, so gradients never touch agreement pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .grid import DegeneratePairError, check_logits, disagreement_region, pixel_log_ratio
from .miner import PreferencePair
from .model import supervised_loss

__all__ = [
    "PreferenceLossSpec",
    "PairLossResult",
    "pair_loss",
    "batch_pair_loss",
    "pseudolabel_loss",
    "update_weight",
    "LOSSES",
]

LOSSES = ("dpo", "rn_dpo", "ipo", "rdpo")


@dataclass(frozen=True)
class PreferenceLossSpec:
    kind: str = "rn_dpo"
    beta: float = 1.0
    ipo_tau: float = 1.0
    rdpo_epsilon: float = 0.2

    def __post_init__(self):
        if self.kind not in LOSSES:
            raise ValueError(f"unknown preference loss {self.kind!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.ipo_tau > 0:
            raise ValueError("ipo_tau must be positive")
        if not 0 <= self.rdpo_epsilon < 0.5:
            raise ValueError("rdpo_epsilon must lie in [0, 0.5)")

    @property
    def normalization(self) -> str:
        return "region" if self.kind == "rn_dpo" else "global"


@dataclass
class PairLossResult:
    loss: float
    delta_policy: float
    delta_ref: float
    logit_arg: float  # beta * (delta_policy - delta_ref), averaged over class terms
    weight: float  # beta * sigmoid(-beta * x), averaged over class terms
    grad: np.ndarray  # d loss / d policy logits, (C, H, W)
    region_size: int = 0
    domain_size: int = 0
    terms: list = field(default_factory=list)  # per-class (class_index, |R_c|, delta_policy, delta_ref)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return float(np.logaddexp(0.0, x))


def update_weight(beta: float, x: float) -> float:
    """DPO per-pair update strength ``beta * sigmoid(-beta * x)``."""
    return float(beta * _sigmoid(-beta * x))


def _loss_and_slope(spec: PreferenceLossSpec, x: float):
    """Loss at ``x = Delta_policy - Delta_ref`` and its derivative in ``x``."""
    b = spec.beta
    if spec.kind in ("dpo", "rn_dpo"):
        return _softplus(-b * x), -b * _sigmoid(-b * x)
    if spec.kind == "ipo":
        target = 1.0 / (2.0 * spec.ipo_tau)
        return (x - target) ** 2, 2.0 * (x - target)
    eps = spec.rdpo_epsilon
    loss = ((1 - eps) * _softplus(-b * x) - eps * _softplus(b * x)) / (1 - 2 * eps)
    slope = (-(1 - eps) * b * _sigmoid(-b * x) - eps * b * _sigmoid(b * x)) / (1 - 2 * eps)
    return loss, slope


def _units(pair: PreferencePair):
    y = pair.y_plus
    if not y.multilabel:
        r = disagreement_region(pair.y_plus, pair.y_minus)
        return [(None, r)] if r.size else []
    classes = range(y.num_classes) if pair.class_index is None else [pair.class_index]
    out = []
    for c in classes:
        r = disagreement_region(pair.y_plus, pair.y_minus, c)
        if r.size:
            out.append((c, r))
    return out


def pair_loss(spec: PreferenceLossSpec, z_policy: np.ndarray, z_ref: np.ndarray, pair: PreferencePair) -> PairLossResult:
    """Loss of one preference pair and its gradient on the policy logits.

    The reference logits are treated as constants.
    """
    zp = check_logits(z_policy, pair.y_plus)
    zr = check_logits(z_ref, pair.y_plus)
    grad = np.zeros_like(zp)
    n_pix = pair.y_plus.domain.size
    units = _units(pair)
    if not units:
        if spec.kind == "rn_dpo":
            raise DegeneratePairError("every class has an empty disagreement region")
        loss, _ = _loss_and_slope(spec, 0.0)
        return PairLossResult(loss, 0.0, 0.0, 0.0, update_weight(spec.beta, 0.0), grad, 0, n_pix)

    losses, dps, drs, args, weights, terms = [], [], [], [], [], []
    inv_units = 1.0 / len(units)
    for c, region in units:
        denom = region.size if spec.kind == "rn_dpo" else n_pix
        dp = float(pixel_log_ratio(zp, pair.y_plus, pair.y_minus, region, c).sum()) / denom
        dr = float(pixel_log_ratio(zr, pair.y_plus, pair.y_minus, region, c).sum()) / denom
        x = dp - dr
        loss, slope = _loss_and_slope(spec, x)
        g = slope * inv_units / denom
        rows, cols = region.rows, region.cols
        if c is None:
            ks = np.arange(region.size)
            upd = np.zeros((zp.shape[0], region.size))
            upd[pair.y_plus.labels[rows, cols], ks] += g
            upd[pair.y_minus.labels[rows, cols], ks] -= g
            grad[:, rows, cols] += upd
        else:
            sign = pair.y_plus.labels[rows, cols, c].astype(np.float64) - pair.y_minus.labels[rows, cols, c]
            grad[c, rows, cols] += g * sign
        losses.append(loss)
        dps.append(dp)
        drs.append(dr)
        args.append(spec.beta * x)
        weights.append(update_weight(spec.beta, x))
        terms.append((c, region.size, dp, dr))
    return PairLossResult(
        loss=float(np.mean(losses)),
        delta_policy=float(np.mean(dps)),
        delta_ref=float(np.mean(drs)),
        logit_arg=float(np.mean(args)),
        weight=float(np.mean(weights)),
        grad=grad,
        region_size=int(sum(r.size for _, r in units)),
        domain_size=n_pix,
        terms=terms,
    )


def batch_pair_loss(spec: PreferenceLossSpec, z_policy: np.ndarray, z_ref: np.ndarray, pairs: Sequence[PreferencePair]):
    """Mean loss over a batch, ``dloss/dz`` of shape ``(N, C, H, W)``, per-pair results."""
    n = len(pairs)
    grad = np.empty_like(np.asarray(z_policy, dtype=np.float64))
    results = []
    total = 0.0
    for i, p in enumerate(pairs):
        r = pair_loss(spec, z_policy[i], z_ref[i], p)
        grad[i] = r.grad / n
        total += r.loss
        results.append(r)
    return total / n, grad, results


def pseudolabel_loss(z_policy: np.ndarray, top_proposal) -> tuple:
    """Supervised loss with the judge's top proposal as a hard target."""
    return supervised_loss(z_policy, top_proposal)
