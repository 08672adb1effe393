"""Candidate-mask slates: the anchor prediction plus structured perturbations.

Families, in the fixed order they appear in a slate:

0. ``base``: the model's own prediction (always first).
1. ``topo``: hole filling, and largest-component cleanup followed by hole filling.
2. ``mc``: Monte Carlo dropout passes and the mask of their mean probability.
3. ``tta``: mean prediction over intensity augmentations.
4. ``extent``: area-quantile thresholding (multi-label) or per-class logit
   bias (multi-class).
5. ``sdf``: signed-distance boundary offsets.
6. ``comp``: compositions (cleanup -> offset, MC mean -> cleanup).

Connectivity is 4-connected for foreground components and 8-connected for
background when looking for holes.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .grid import Mask, check_logits
from .model import SegmenterParams, forward

__all__ = [
    "ProposalConfig",
    "Slate",
    "DegenerateSlateError",
    "probabilities",
    "base_prediction",
    "mask_from_probabilities",
    "fill_holes",
    "keep_largest_component",
    "topology_edit",
    "mc_dropout_proposals",
    "augment_intensity",
    "tta_mean_proposal",
    "area_quantile_threshold",
    "logit_bias_proposal",
    "signed_distance",
    "sdf_offset_proposal",
    "generate_slate",
    "image_seed",
]

FOUR = ndimage.generate_binary_structure(2, 1)
EIGHT = ndimage.generate_binary_structure(2, 2)

FAMILIES = ("topo", "mc", "tta", "extent", "sdf", "comp")


class DegenerateSlateError(ValueError):
    """Fewer than two distinct proposals could be produced."""


@dataclass(frozen=True)
class ProposalConfig:
    K: int = 8
    hole_cap: float = 0.1
    topology: bool = True
    mc_passes: int = 4
    mc_mean: bool = True
    tta: tuple = (("gamma", 0.8), ("gamma", 1.25), ("contrast", 1.2))
    area_scales: tuple = (0.7, 0.85, 0.93, 1.07, 1.15, 1.3)
    logit_biases: tuple = (-1.0, -0.5, -0.25, 0.25, 0.5, 1.0)
    bias_classes: Optional[tuple] = None  # None: every class including background
    sdf_offsets: tuple = (-2.0, -1.0, 1.0, 2.0)
    compositions: bool = True
    composition_offsets: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if not 0 <= self.hole_cap:
            raise ValueError("hole_cap must be non-negative")
        object.__setattr__(self, "tta", tuple(tuple(a) for a in self.tta))

    def max_proposals(self, num_classes: int, multilabel: bool) -> int:
        """Upper bound on non-anchor proposals the enabled families can emit."""
        n = 2 * self.topology + self.mc_passes + (self.mc_mean and self.mc_passes > 0) + (len(self.tta) > 0)
        if multilabel:
            n += num_classes * len(self.area_scales)
        else:
            ncls = num_classes if self.bias_classes is None else len(self.bias_classes)
            n += ncls * len(self.logit_biases)
        n += len(self.sdf_offsets)
        if self.compositions:
            n += len(self.composition_offsets) * self.topology + (self.mc_passes > 0) * self.topology
        return n


@dataclass
class Slate:
    image_id: str
    masks: list
    tags: list
    anchor_logits: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return len(self.masks)

    @property
    def anchor(self) -> Mask:
        return self.masks[0]


# ---------------------------------------------------------------------------
# predictions


def probabilities(z: np.ndarray, multilabel: bool) -> np.ndarray:
    """Softmax over classes or per-channel sigmoid; works on ``(C, H, W)`` or batches."""
    z = np.asarray(z, dtype=np.float64)
    if multilabel:
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    ax = -3
    e = np.exp(z - z.max(axis=ax, keepdims=True))
    return e / e.sum(axis=ax, keepdims=True)


def base_prediction(z: np.ndarray, multilabel: bool = False) -> Mask:
    """Argmax over classes (ties go to the lowest class id) or ``logit > 0`` per channel."""
    z = check_logits(z)
    if multilabel:
        return Mask((z > 0).transpose(1, 2, 0).astype(np.uint8), z.shape[0], multilabel=True)
    return Mask(np.argmax(z, axis=0), z.shape[0])


def mask_from_probabilities(prob: np.ndarray, multilabel: bool = False) -> Mask:
    """Hard mask of a ``(C, H, W)`` probability map (strict ``> 0.5`` per channel)."""
    prob = np.asarray(prob, dtype=np.float64)
    if multilabel:
        return Mask((prob > 0.5).transpose(1, 2, 0).astype(np.uint8), prob.shape[0], multilabel=True)
    return Mask(np.argmax(prob, axis=0), prob.shape[0])


# ---------------------------------------------------------------------------
# topology


def _fill_binary(fg: np.ndarray, cap: float, assignable: np.ndarray) -> np.ndarray:
    """Pixels to add to ``fg`` by iterated capped hole filling (a fixed point)."""
    fg = fg.copy()
    added = np.zeros_like(fg)
    while True:
        size = int(fg.sum())
        if size == 0:
            return added
        lab, n = ndimage.label(~fg, structure=EIGHT)
        if n == 0:
            return added
        border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        ok = sizes <= cap * size
        ok[0] = False
        ok[border] = False
        new = ok[lab] & assignable & ~fg
        if not new.any():
            return added
        fg |= new
        added |= new


def _largest_component(fg: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(fg, structure=FOUR)
    if n <= 1:
        return fg.copy()
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == int(np.argmax(sizes))


def fill_holes(y: Mask, hole_cap: float = 0.1) -> Mask:
    """Fill enclosed holes no larger than ``hole_cap`` times the structure.

    Holes are 8-connected components of non-class pixels that do not touch
    the image border. Filling repeats until nothing changes, so the result is
    idempotent. In multi-class masks only background pixels are reassigned.
    """
    if y.multilabel:
        lab = y.labels.copy()
        for c in range(y.num_classes):
            fg = lab[:, :, c].astype(bool)
            lab[:, :, c] |= _fill_binary(fg, hole_cap, np.ones_like(fg)).astype(np.uint8)
        return Mask(lab, y.num_classes, True)
    lab = y.labels.copy()
    for c in range(1, y.num_classes):
        add = _fill_binary(lab == c, hole_cap, lab == 0)
        lab[add] = c
    return Mask(lab, y.num_classes)


def keep_largest_component(y: Mask) -> Mask:
    """Keep only the largest 4-connected component of every class."""
    if y.multilabel:
        lab = y.labels.copy()
        for c in range(y.num_classes):
            lab[:, :, c] = _largest_component(lab[:, :, c].astype(bool))
        return Mask(lab, y.num_classes, True)
    lab = y.labels.copy()
    for c in range(1, y.num_classes):
        fg = lab == c
        lab[fg & ~_largest_component(fg)] = 0
    return Mask(lab, y.num_classes)


def topology_edit(y: Mask, kind: str = "fill_holes", hole_cap: float = 0.1) -> Mask:
    if kind == "fill_holes":
        return fill_holes(y, hole_cap)
    if kind == "largest_cc_then_fill":
        return fill_holes(keep_largest_component(y), hole_cap)
    raise ValueError(f"unknown topology edit {kind!r}")


# ---------------------------------------------------------------------------
# stochastic / augmented predictions


def mc_dropout_proposals(params: SegmenterParams, image, passes: int, seed, multilabel: bool = False):
    """``passes`` dropout predictions and the mask of their mean probability."""
    if passes < 1:
        raise ValueError("passes must be >= 1")
    batch = np.repeat(np.asarray(image, dtype=np.float64)[None], passes, axis=0)
    z = forward(params, batch, dropout=[_pass_seed(seed, k) for k in range(passes)])
    masks = [base_prediction(zk, multilabel) for zk in z]
    mean = mask_from_probabilities(probabilities(z, multilabel).mean(axis=0), multilabel)
    return masks, mean


def _pass_seed(seed, k):
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return base + [k]


def augment_intensity(image: np.ndarray, kind: str, value: float = 0.0) -> np.ndarray:
    """Gamma / brightness / contrast change of an intensity image.

    Gamma acts on the min-max normalized image and maps back to the original
    range, so negative intensities are fine.
    """
    x = np.asarray(image, dtype=np.float64)
    if kind == "identity":
        return x
    if kind == "gamma":
        if value == 1.0:
            return x
        lo, hi = x.min(), x.max()
        if hi <= lo:
            return x
        return lo + (hi - lo) * ((x - lo) / (hi - lo)) ** value
    if kind == "brightness":
        return x + value
    if kind == "contrast":
        if value == 1.0:
            return x
        m = x.mean()
        return m + value * (x - m)
    raise ValueError(f"unknown augmentation {kind!r}")


def tta_mean_proposal(params: SegmenterParams, image, augmentations: Sequence, multilabel: bool = False) -> Mask:
    """Mask of the mean probability over forward passes on augmented images."""
    if not augmentations:
        raise ValueError("need at least one augmentation")
    batch = np.stack([augment_intensity(image, *_aug(a)) for a in augmentations])
    z = forward(params, batch)
    return mask_from_probabilities(probabilities(z, multilabel).mean(axis=0), multilabel)


def _aug(a):
    if isinstance(a, str):
        return (a,)
    return tuple(a)


# ---------------------------------------------------------------------------
# extent


def area_quantile_threshold(prob: np.ndarray, scale: float, anchor_area: int) -> np.ndarray:
    """Boolean mask of the ``round(scale * anchor_area)`` most probable pixels.

    Order is probability descending, then row-major index ascending; the
    requested area is clamped to the image size. Rounding is half-up.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if scale < 0:
        raise ValueError("scale must be non-negative")
    n = int(np.floor(scale * anchor_area + 0.5))
    n = min(max(n, 0), prob.size)
    flat = prob.reshape(-1)
    order = np.lexsort((np.arange(flat.size), -flat))
    out = np.zeros(flat.size, dtype=bool)
    out[order[:n]] = True
    return out.reshape(prob.shape)


def logit_bias_proposal(z: np.ndarray, class_index: int, bias: float) -> Mask:
    """Multi-class argmax after adding ``bias`` to one class's logits."""
    z = check_logits(z).copy()
    z[class_index] += bias
    return Mask(np.argmax(z, axis=0), z.shape[0])


# ---------------------------------------------------------------------------
# signed-distance offsets


def signed_distance(fg: np.ndarray) -> np.ndarray:
    """Euclidean signed distance with the inner boundary layer at 0.

    Outside pixels get their distance to the nearest foreground pixel (>= 1);
    inside pixels get ``-(d - 1)`` where ``d`` is the distance to the nearest
    background pixel, so thresholding at ``offset`` grows (positive) or
    shrinks (negative) the mask and offset 0 returns it unchanged.
    """
    fg = np.asarray(fg, dtype=bool)
    if not fg.any():
        return np.full(fg.shape, np.inf)
    out = np.empty(fg.shape)
    if fg.all():
        out[:] = -np.inf
        return out
    d_in = ndimage.distance_transform_edt(fg)
    d_out = ndimage.distance_transform_edt(~fg)
    out[fg] = -(d_in[fg] - 1.0)
    out[~fg] = d_out[~fg]
    return out


def sdf_offset_proposal(y: Mask, offset: float, class_index: Optional[int] = None) -> Mask:
    """Move class boundaries by ``offset`` pixels (positive grows).

    Without ``class_index`` every foreground class is shifted in class order.
    In multi-class masks a growing class only claims background pixels and a
    shrinking class hands its pixels back to background.
    """
    classes = list(y.foreground_classes()) if class_index is None else [class_index]
    lab = y.labels.copy()
    for c in classes:
        if y.multilabel:
            fg = lab[:, :, c].astype(bool)
            lab[:, :, c] = signed_distance(fg) <= offset
            continue
        fg = lab == c
        new = signed_distance(fg) <= offset
        lab[fg & ~new] = 0
        lab[new & (lab == 0)] = c
    return Mask(lab, y.num_classes, y.multilabel)


# ---------------------------------------------------------------------------
# slates


def image_seed(seed: int, image_id: str) -> list:
    """Per-image RNG entropy, independent of processing order."""
    return [int(seed), zlib.crc32(str(image_id).encode("utf-8"))]


def _family_proposals(params, image, cfg: ProposalConfig, seed, multilabel):
    """``(anchor, anchor_logits, {family: [(tag, mask), ...]})`` from one batched forward."""
    image = np.asarray(image, dtype=np.float64)
    entropy = image_seed(*seed) if isinstance(seed, tuple) else [int(seed)]
    inputs = [image] + [image] * cfg.mc_passes + [augment_intensity(image, *_aug(a)) for a in cfg.tta]
    drop = [None] + [entropy + [k] for k in range(cfg.mc_passes)] + [None] * len(cfg.tta)
    z = forward(params, np.stack(inputs), dropout=drop)
    z0 = z[0]
    anchor = base_prediction(z0, multilabel)
    fam = {f: [] for f in FAMILIES}

    if cfg.topology:
        fam["topo"].append(("topo:fill", fill_holes(anchor, cfg.hole_cap)))
        fam["topo"].append(("topo:lcc_fill", topology_edit(anchor, "largest_cc_then_fill", cfg.hole_cap)))

    mc_mean = None
    if cfg.mc_passes:
        zmc = z[1 : 1 + cfg.mc_passes]
        for k in range(cfg.mc_passes):
            fam["mc"].append((f"mc:{k}", base_prediction(zmc[k], multilabel)))
        mc_mean = mask_from_probabilities(probabilities(zmc, multilabel).mean(axis=0), multilabel)
        if cfg.mc_mean:
            fam["mc"].append(("mc:mean", mc_mean))

    if cfg.tta:
        zt = z[1 + cfg.mc_passes :]
        fam["tta"].append(("tta:mean", mask_from_probabilities(probabilities(zt, multilabel).mean(axis=0), multilabel)))

    if multilabel:
        prob = probabilities(z0, True)
        for c in range(anchor.num_classes):
            area = int(anchor.labels[:, :, c].sum())
            if area == 0:
                continue
            for s in cfg.area_scales:
                lab = anchor.labels.copy()
                lab[:, :, c] = area_quantile_threshold(prob[c], s, area)
                fam["extent"].append((f"area:c{c}:x{s:g}", Mask(lab, anchor.num_classes, True)))
    else:
        classes = range(anchor.num_classes) if cfg.bias_classes is None else cfg.bias_classes
        for c in classes:
            for b in cfg.logit_biases:
                fam["extent"].append((f"bias:c{c}:{b:+g}", logit_bias_proposal(z0, c, b)))

    for o in cfg.sdf_offsets:
        fam["sdf"].append((f"sdf:{o:+g}", sdf_offset_proposal(anchor, o)))

    if cfg.compositions and cfg.topology:
        cleaned = topology_edit(anchor, "largest_cc_then_fill", cfg.hole_cap)
        for o in cfg.composition_offsets:
            fam["comp"].append((f"comp:lcc_fill>sdf:{o:+g}", sdf_offset_proposal(cleaned, o)))
        if mc_mean is not None:
            fam["comp"].append(("comp:mc_mean>lcc_fill", topology_edit(mc_mean, "largest_cc_then_fill", cfg.hole_cap)))
    return anchor, z0, fam


def generate_slate(
    params: SegmenterParams,
    image,
    cfg: ProposalConfig,
    seed: int = 0,
    multilabel: bool = False,
    image_id: str = "",
    keep_logits: bool = False,
) -> Slate:
    """Anchor first, then family proposals round-robin until ``cfg.K`` masks.

    Bit-identical masks are dropped (first occurrence in family order wins)
    before the round-robin. If fewer than ``K`` distinct masks exist the slate
    is shorter; fewer than two raises :class:`DegenerateSlateError`.
    """
    anchor, z0, fam = _family_proposals(params, image, cfg, (seed, image_id), multilabel)
    seen = {anchor.tobytes()}
    queues = []
    for f in FAMILIES:
        q = []
        for tag, m in fam[f]:
            key = m.tobytes()
            if key not in seen:
                seen.add(key)
                q.append((tag, m))
        queues.append(q)
    masks, tags = [anchor], ["base"]
    depth = 0
    while len(masks) < cfg.K and any(depth < len(q) for q in queues):
        for q in queues:
            if depth < len(q) and len(masks) < cfg.K:
                tags.append(q[depth][0])
                masks.append(q[depth][1])
        depth += 1
    if len(masks) < 2:
        raise DegenerateSlateError(f"slate for {image_id!r} has a single distinct proposal")
    return Slate(str(image_id), masks, tags, z0 if keep_logits else None)
