from fractions import Fraction

import numpy as np
import pytest

from prefseg.diagnostics import (
    PairRecord,
    SlateRecord,
    harmful_mass,
    judge_diagnostics,
    least_squares_slope,
    normalize_series,
    slate_metrics,
)


def test_single_harmful_pair():
    assert harmful_mass([PairRecord(0.4, 0.6, 0.5)]) == pytest.approx(0.1)
    assert harmful_mass([(0.6, 0.4, 0.5)]) == 0.0
    assert harmful_mass([]) is None
    # averaged over all pairs, helpful ones count as zero
    assert harmful_mass([(0.4, 0.6, 0.5), (0.9, 0.1, 1.0)]) == pytest.approx(0.05)


def test_slate_hand_example():
    m = slate_metrics(SlateRecord((0.6, 0.4, 0.7), top=1))
    f = Fraction
    assert m["harm_top"] == 1
    assert m["harm_mag"] == f(0.6) - f(0.4)
    assert m["headroom"] == f(0.4) - f(0.6)
    assert m["regret"] == f(0.7) - f(0.4)
    assert float(m["harm_mag"]) == pytest.approx(0.2) and float(m["regret"]) == pytest.approx(0.3)


def test_anchor_on_top_is_harmless():
    m = slate_metrics(SlateRecord((0.6, 0.4), top=0))
    assert m["harm_top"] == 0 and m["harm_mag"] == 0 and m["headroom"] == 0


def test_identities_on_random_slates():
    rng = np.random.default_rng(0)
    slates = []
    for _ in range(500):
        k = int(rng.integers(2, 9))
        s = SlateRecord(tuple(rng.random(k)), int(rng.integers(0, k)))
        m = slate_metrics(s)
        assert m["headroom"] + m["regret"] == m["oracle_gap"]
        assert m["harm_mag"] == max(Fraction(0), -m["headroom"])
        slates.append(s)
    d = judge_diagnostics(slates)
    exact = sum((max(Fraction(0), -slate_metrics(s)["headroom"]) for s in slates), Fraction(0)) / len(slates)
    assert d.harm_mag == float(exact)


def test_pair_flip_and_summary():
    pairs = [PairRecord(0.5, 0.6, 1.0), PairRecord(0.7, 0.6, 1.0), (0.1, 0.2), (0.3, 0.3)]
    d = judge_diagnostics([SlateRecord((0.5, 0.6), 1)], pairs, harm_series=[2.0, 4.0, 6.0, 8.0])
    assert d.pair_flip == 0.5 and d.n_pairs == 4 and d.n_slates == 1
    assert d.harm_normalized == [0.5, 1.0, 1.5, 2.0]
    assert set(d.to_dict()) >= {"harm_top", "harm_mag", "headroom", "regret", "pair_flip"}
    empty = judge_diagnostics([])
    assert empty.harm_top is None and empty.pair_flip is None


def test_normalization_and_slope():
    assert normalize_series([1.0, 2.0, 3.0, 6.0]) == [0.5, 1.0, 1.5, 3.0]
    assert normalize_series([0.0, 0.0, 0.0, 1.0]) == [None] * 4
    assert normalize_series([None, 1.0, 1.0, 1.0, 2.0]) == [None, 1.0, 1.0, 1.0, 2.0]
    assert normalize_series([1.0, None]) == [None, None]
    assert least_squares_slope([0.0, 1.0, 2.0, 3.0]) == pytest.approx(1.0)
    assert least_squares_slope([5.0, None, 5.0]) == 0.0
    assert least_squares_slope([1.0]) is None
