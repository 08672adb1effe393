import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefseg.grid import (
    DegeneratePairError,
    Mask,
    ShapeError,
    delta_pair,
    disagreement_region,
    iou,
    log_likelihood,
)

from conftest import perturb, random_multiclass, random_multilabel


def binary(rows):
    return Mask(np.array(rows), 2)


def test_iou_identity_and_disjoint():
    a = binary([[1, 0], [0, 0]])
    b = binary([[0, 1], [0, 0]])
    assert iou(a, a) == 1.0
    assert iou(a, b) == 0.0


def test_iou_hand_counted_2x2():
    # intersection {(0,0)}, union {(0,0),(0,1),(1,0)}
    a = binary([[1, 1], [0, 0]])
    b = binary([[1, 0], [1, 0]])
    assert iou(a, b) == pytest.approx(1 / 3, abs=0)


def test_iou_empty_conventions():
    empty = binary([[0, 0], [0, 0]])
    full = binary([[1, 1], [1, 1]])
    assert iou(empty, empty) == 1.0
    assert iou(empty, full) == 0.0


def test_iou_multiclass_averages_present_classes():
    a = Mask(np.array([[1, 1, 2, 0]]), 4)
    b = Mask(np.array([[1, 0, 2, 2]]), 4)
    # class 1: 1/2, class 2: 1/2, class 3 absent in both
    assert iou(a, b) == pytest.approx(0.5)


def test_iou_multilabel_per_class():
    a = Mask(np.array([[[1, 0], [1, 1]]], dtype=np.uint8), 2, multilabel=True)
    b = Mask(np.array([[[1, 1], [0, 1]]], dtype=np.uint8), 2, multilabel=True)
    assert iou(a, b, class_index=0) == pytest.approx(0.5)
    assert iou(a, b, class_index=1) == pytest.approx(0.5)


def test_iou_mismatch_raises():
    with pytest.raises(ShapeError):
        iou(binary([[0, 1]]), binary([[0], [1]]))
    with pytest.raises(ShapeError):
        iou(Mask(np.zeros((2, 2), int), 2), Mask(np.zeros((2, 2), int), 3))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_iou_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a = random_multiclass(rng, 5, 6, 3)
    b = random_multiclass(rng, 5, 6, 3)
    assert iou(a, b) == iou(b, a)
    perm = rng.permutation(30)
    pa = Mask(a.labels.reshape(-1)[perm].reshape(5, 6), 3)
    pb = Mask(b.labels.reshape(-1)[perm].reshape(5, 6), 3)
    assert iou(pa, pb) == pytest.approx(iou(a, b), abs=1e-15)
    assert (iou(a, b) == 1.0) == bool(np.array_equal(a.labels, b.labels) or not (a.labels.any() or b.labels.any()))


def test_log_likelihood_uniform_cases():
    z = np.zeros((2, 3, 3))
    y = Mask(np.random.default_rng(0).integers(0, 2, (3, 3)), 2)
    assert log_likelihood(z, y) == pytest.approx(math.log(0.5))
    ym = Mask(np.ones((3, 3, 2), dtype=np.uint8), 2, multilabel=True)
    assert log_likelihood(z, ym, class_index=1) == pytest.approx(math.log(0.5))


def test_log_likelihood_scalar_oracle():
    z = np.array([[[2.0, 0.0]], [[0.0, 2.0]]])  # (C=2, H=1, W=2)
    y = Mask(np.array([[0, 1]]), 2)
    p = math.exp(2) / (math.exp(2) + 1)  # both pixels pick their larger logit
    assert log_likelihood(z, y) == pytest.approx(math.log(p), rel=1e-14)
    y2 = Mask(np.array([[1, 1]]), 2)
    expected = 0.5 * (math.log(1 - p) + math.log(p))
    assert log_likelihood(z, y2) == pytest.approx(expected, rel=1e-14)


def test_log_likelihood_rejects_nonfinite():
    z = np.zeros((2, 2, 2))
    z[0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        log_likelihood(z, Mask(np.zeros((2, 2), int), 2))


def test_log_likelihood_argmax_is_maximal(rng):
    for _ in range(20):
        z = rng.normal(size=(3, 4, 4)) * 3
        best = Mask(z.argmax(axis=0), 3)
        other = random_multiclass(rng, 4, 4, 3)
        assert log_likelihood(z, best) >= log_likelihood(z, other)
        assert log_likelihood(z, other) <= 0


def test_disagreement_region_cases():
    a = Mask(np.zeros((3, 3), int), 2)
    assert disagreement_region(a, a).size == 0
    lab = a.labels.copy()
    pix = [(0, 1), (1, 2), (2, 0)]
    for r, c in pix:
        lab[r, c] = 1
    b = Mask(lab, 2)
    reg = disagreement_region(a, b)
    assert sorted(zip(reg.rows.tolist(), reg.cols.tolist())) == sorted(pix)
    comp = Mask(1 - a.labels, 2)
    assert disagreement_region(a, comp).size == 9


def test_disagreement_region_per_class_multilabel():
    a = Mask(np.array([[[1, 0], [0, 0]]], dtype=np.uint8), 2, multilabel=True)
    b = Mask(np.array([[[1, 1], [1, 0]]], dtype=np.uint8), 2, multilabel=True)
    assert disagreement_region(a, b, 0).size == 1
    assert disagreement_region(a, b, 1).size == 1
    assert disagreement_region(a, b).size == 2


def test_delta_pair_one_pixel_oracle():
    # 2x2, C=2, y+ and y- differ only at (1, 0)
    z = np.array([[[0.5, -1.0], [1.5, 0.0]], [[-0.5, 2.0], [0.25, 0.0]]])
    yp = Mask(np.array([[0, 1], [1, 0]]), 2)
    ym = Mask(np.array([[0, 1], [0, 0]]), 2)
    a, b = 1.5, 0.25  # logits of classes 0 and 1 at (1, 0)
    lse = math.log(math.exp(a) + math.exp(b))
    delta = (b - lse) - (a - lse)
    assert delta_pair(z, yp, ym, "region") == pytest.approx(delta, rel=1e-14)
    assert delta_pair(z, yp, ym, "global") == pytest.approx(delta / 4, rel=1e-14)


def test_delta_pair_degenerate():
    z = np.zeros((2, 2, 2))
    y = Mask(np.zeros((2, 2), int), 2)
    assert delta_pair(z, y, y, "global") == 0.0
    with pytest.raises(DegeneratePairError):
        delta_pair(z, y, y, "region")


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 100_000), st.booleans())
def test_delta_scaling_and_antisymmetry(seed, multilabel):
    rng = np.random.default_rng(seed)
    C = 3
    if multilabel:
        yp = random_multilabel(rng, 6, 5, C)
        c = int(rng.integers(0, C))
    else:
        yp = random_multiclass(rng, 6, 5, C)
        c = None
    ym = perturb(rng, yp, 0.3)
    z = rng.normal(size=(C, 6, 5)) * 4
    reg = disagreement_region(yp, ym, c)
    if reg.size == 0:
        return
    g = delta_pair(z, yp, ym, "global", c)
    r = delta_pair(z, yp, ym, "region", c)
    assert abs(g - reg.size / 30 * r) <= 1e-12 * max(1.0, abs(r))
    assert delta_pair(z, ym, yp, "global", c) == -g
    assert delta_pair(z, ym, yp, "region", c) == -r


def test_agreement_pixels_do_not_matter(rng):
    yp = random_multiclass(rng, 6, 6, 3)
    ym = perturb(rng, yp, 0.2)
    reg = disagreement_region(yp, ym)
    z = rng.normal(size=(3, 6, 6))
    z2 = z + rng.normal(size=z.shape) * 10 * (~reg.as_mask())[None]
    for norm in ("global", "region"):
        assert delta_pair(z, yp, ym, norm) == delta_pair(z2, yp, ym, norm)
