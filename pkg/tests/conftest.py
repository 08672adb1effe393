import numpy as np
import pytest

from prefseg.grid import Mask


def random_multiclass(rng, h, w, c, p_same=None):
    return Mask(rng.integers(0, c, (h, w)), c)


def random_multilabel(rng, h, w, c):
    return Mask(rng.integers(0, 2, (h, w, c)).astype(np.uint8), c, multilabel=True)


def perturb(rng, mask, frac=0.2):
    """A copy of ``mask`` with roughly ``frac`` of its pixels re-drawn."""
    lab = mask.labels.copy()
    h, w = lab.shape[:2]
    hit = rng.random((h, w)) < frac
    if mask.multilabel:
        lab[hit] = rng.integers(0, 2, (hit.sum(), mask.num_classes))
    else:
        lab[hit] = rng.integers(0, mask.num_classes, hit.sum())
    return Mask(lab, mask.num_classes, mask.multilabel)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
