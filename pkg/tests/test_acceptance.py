"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trend and harmful-mass criteria share a module-scoped fixture that trains
three base segmenters, calibrates a weak judge per seed and runs four Stage-2
fine-tunes per seed. Expect roughly half an hour on a single core.
"""

import functools
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy import ndimage

from prefseg import pipeline as P
from prefseg.diagnostics import (
    SlateRecord,
    judge_diagnostics,
    least_squares_slope,
    normalize_series,
    slate_metrics,
)
from prefseg.errors import FormatError
from prefseg.grid import Mask, delta_pair, disagreement_region
from prefseg.judge import JudgeSpec, rank_slate, score_slate
from prefseg.loss import PreferenceLossSpec, pair_loss
from prefseg.miner import MINERS, MinerSpec, PreferencePair
from prefseg.model import (
    Architecture,
    backward,
    checkpoint_from_bytes,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    supervised_loss,
)
from prefseg.proposals import (
    FOUR,
    ProposalConfig,
    fill_holes,
    generate_slate,
    keep_largest_component,
    sdf_offset_proposal,
)
from prefseg.synthdata import DatasetSpec, generate, read_sample, sample_from_bytes, write_sample

from conftest import perturb

SEEDS = (0, 1, 2)
TREND_EPOCHS = 30
# (lr, beta) per judge regime and method, chosen by the validation selection
# score over lr {2e-5, 5e-5, 1e-4} x beta {0.25, 1, 1.5} on seed 0
# (demos/04_grid.py reproduces the sweep)
HPARAMS = {
    ("weak", "dpo"): (2e-5, 1.5),
    ("weak", "rn_dpo"): (5e-5, 1.5),
    ("oracle", "dpo"): (2e-5, 1.5),
    ("oracle", "rn_dpo"): (2e-5, 1.5),
}
JUDGE_BUDGETS = (3, 5, 8, 12)
JUDGE_BAND = (0.2, 0.4)
JUDGE_CFG = P.BaseConfig(epochs=100)
JUDGE_SAMPLE_EPOCHS = 1600


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return emit


def pair(yp, ym, c=None):
    return PreferencePair("fixture", yp, ym, 1.0, 0.0, "fixture", 1, 2, c)


def random_pair(rng, multilabel, h=None, w=None, C=None):
    h = h or int(rng.integers(2, 12))
    w = w or int(rng.integers(2, 12))
    if multilabel:
        C = C or int(rng.integers(1, 4))
        yp = Mask(rng.integers(0, 2, (h, w, C)).astype(np.uint8), C, multilabel=True)
    else:
        C = C or int(rng.integers(2, 5))
        yp = Mask(rng.integers(0, C, (h, w)), C)
    ym = perturb(rng, yp, rng.uniform(0.05, 0.8))
    return yp, ym


# ---------------------------------------------------------------------------
# 1


def test_criterion_1_normalization_identity(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for multilabel in (False, True):
        while n < (1000 if not multilabel else 2000):
            yp, ym = random_pair(rng, multilabel)
            z = rng.normal(scale=rng.uniform(0.1, 10), size=(yp.num_classes,) + yp.labels.shape[:2])
            for c in range(yp.num_classes) if multilabel else [None]:
                R = disagreement_region(yp, ym, c)
                if R.size == 0:
                    continue
                g = delta_pair(z, yp, ym, "global", c)
                r = delta_pair(z, yp, ym, "region", c)
                err = abs(g - (R.size / R.domain.size) * r) / max(1.0, abs(r))
                worst = max(worst, err)
                n += 1
    dt = time.perf_counter() - t0
    report(1, worst <= 1e-12 and dt < 10, f"{n} fixtures, worst scaled error {worst:.2e}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2


def central_diff(f, z, eps=1e-5):
    g = np.zeros_like(z)
    for i in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[i] += eps
        zm[i] -= eps
        g[i] = (f(zp) - f(zm)) / (2 * eps)
    return g


def test_criterion_2_gradients(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = {}
    for kind in ("dpo", "rn_dpo", "ipo", "rdpo", "supervised"):
        errs = []
        while len(errs) < 50:
            multilabel = len(errs) % 2 == 1
            yp, ym = random_pair(rng, multilabel, h=int(rng.integers(2, 6)), w=int(rng.integers(2, 6)))
            z = rng.normal(size=(yp.num_classes,) + yp.labels.shape[:2])
            if kind == "supervised":
                f = lambda q: supervised_loss(q, yp)[0]
                ana = supervised_loss(z, yp)[1]
            else:
                spec = PreferenceLossSpec(kind, beta=float(rng.uniform(0.25, 2.0)))
                pr = pair(yp, ym)
                try:
                    zr = z + rng.normal(scale=0.5, size=z.shape)
                    ana = pair_loss(spec, z, zr, pr).grad
                except ValueError:  # empty region under rn_dpo
                    continue
                f = lambda q: pair_loss(spec, q, zr, pr).loss
            num = central_diff(f, z)
            errs.append(np.abs(ana - num).max() / max(np.abs(num).max(), 1e-12))
        worst[kind] = max(errs)
    # the same check through the network for one loss, on a few parameters
    p = init_params(Architecture(1, 3, (3, 4, 5), 0.0), 0)
    x = rng.normal(size=(8, 8, 1))
    yp, ym = random_pair(rng, False, 8, 8, 3)
    zr = forward(p, x) + rng.normal(scale=0.3, size=(3, 8, 8))
    spec = PreferenceLossSpec("rn_dpo")
    grads = backward(p, x, pair_loss(spec, forward(p, x), zr, pair(yp, ym)).grad)
    net_errs = []
    for _ in range(6):
        v = {k: rng.normal(size=a.shape) for k, a in p.arrays.items()}

        def f(eps):
            q = p.copy()
            for k in q.arrays:
                q.arrays[k] = q.arrays[k] + eps * v[k]
            return pair_loss(spec, forward(q, x), zr, pair(yp, ym)).loss

        num = (f(1e-5) - f(-1e-5)) / 2e-5
        ana = sum(float((grads[k] * v[k]).sum()) for k in v)
        net_errs.append(abs(num - ana) / max(abs(ana), 1e-12))
    worst["network"] = max(net_errs)
    dt = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and dt < 120
    report(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {dt:.1f}s")


# ---------------------------------------------------------------------------
# 3


def test_criterion_3_support_restriction(report):
    rng = np.random.default_rng(3)
    p = init_params(Architecture(1, 3, (4, 6, 8), 0.0), 1)
    spec = PreferenceLossSpec("rn_dpo", beta=1.5)
    checked, bad = 0, 0
    for trial in range(40):
        multilabel = trial % 2 == 1
        x = rng.normal(size=(8, 8, 1))
        yp, ym = random_pair(rng, multilabel, 8, 8, 3)
        pr = pair(yp, ym)
        z = forward(p, x)
        zr = z + rng.normal(scale=0.3, size=z.shape)
        try:
            base = pair_loss(spec, z, zr, pr)
        except ValueError:
            continue
        g0 = backward(p, x, base.grad)
        if multilabel:
            agree = yp.labels.transpose(2, 0, 1) == ym.labels.transpose(2, 0, 1)
        else:
            agree = np.broadcast_to(yp.labels == ym.labels, z.shape)
        # all agreement entries at once, then a few one at a time
        idx = [agree] + [tuple(i) for i in np.argwhere(agree)[rng.permutation(int(agree.sum()))[:5]]]
        for where in idx:
            z2, zr2 = z.copy(), zr.copy()
            z2[where] += rng.normal(scale=5.0, size=np.shape(z2[where]))
            zr2[where] -= 3.0
            r = pair_loss(spec, z2, zr2, pr)
            g = backward(p, x, r.grad)
            same = r.loss == base.loss and np.array_equal(r.grad, base.grad)
            same = same and all(np.array_equal(g[k], g0[k]) for k in g0)
            bad += not same
            checked += 1
        bad += bool(np.any(base.grad[agree] != 0))
    report(3, bad == 0 and checked > 100, f"{checked} agreement perturbations, {bad} changed loss or gradients")


# ---------------------------------------------------------------------------
# shared experimental setup on the default regime


@functools.lru_cache(maxsize=None)
def dataset():
    return generate(DatasetSpec())


@functools.lru_cache(maxsize=None)
def world(seed):
    """Base segmenter and calibrated weak judge for one label-draw seed."""
    t0 = time.perf_counter()
    split = P.split_regime(dataset(), P.RegimeSpec(), seed)
    base = P.train_base(split.seg, split.val, P.BaseConfig(), seed=seed)
    judge, harm_top, table = P.calibrate_judge(
        base.params, split.qc, split.val, JUDGE_BUDGETS, JUDGE_BAND, JUDGE_CFG, seed=seed, sample_epochs=JUDGE_SAMPLE_EPOCHS
    )
    return {
        "split": split,
        "base": base.params,
        "judge": judge,
        "harm_top": harm_top,
        "calibration": table,
        "seconds": time.perf_counter() - t0,
    }


# ---------------------------------------------------------------------------
# 4


def test_criterion_4_oracle_soundness(report):
    w = world(0)
    split, base = w["split"], w["base"]
    oracle = JudgeSpec("oracle")
    t0 = time.perf_counter()
    worst = {"flip": 0.0, "harm_top": 0.0, "regret": 0.0, "H": 0.0}
    for kind in MINERS:
        miner = MinerSpec(kind)
        slates, pairs = P.slate_records(base, oracle, split.val, ProposalConfig(), seed=0, miner=miner)
        d = judge_diagnostics(slates, pairs)
        worst["flip"] = max(worst["flip"], d.pair_flip or 0.0)
        worst["harm_top"] = max(worst["harm_top"], d.harm_top)
        worst["regret"] = max(worst["regret"], d.regret)
        rec, _ = P.finetune(base, oracle, miner, split.pref, split.val, split.test, P.FinetuneConfig(method="rn_dpo", epochs=3, lr=1e-4))
        worst["H"] = max([worst["H"]] + [r.H for r in rec.rows if r.H is not None])
        flips = sum(pr.margin < 0 for epoch in rec.pairs for pr in epoch)
        worst["flip"] = max(worst["flip"], flips)
    dt = time.perf_counter() - t0
    ok = all(v == 0 for v in worst.values()) and dt < 300
    report(4, ok, ", ".join(f"max {k} {v}" for k, v in worst.items()) + f" over {len(MINERS)} miners; {dt:.0f}s")


# ---------------------------------------------------------------------------
# 5


def test_criterion_5_diagnostics_algebra(report):
    rng = np.random.default_rng(5)
    p = init_params(Architecture(1, 4, (4, 6, 8), 0.3), 2)
    ds = generate(DatasetSpec(height=32, width=32, counts={"train": 0, "val": 40, "test": 0, "qc": 0}, seed=5))
    records, bad = [], 0
    for i, s in enumerate(ds["val"]):
        slate = generate_slate(p, s.image, ProposalConfig(), seed=i)
        oracle = score_slate(JudgeSpec("oracle"), s.image, slate, s.mask)
        judge = rng.random(slate.K)  # a judge that knows nothing
        records.append(SlateRecord(tuple(oracle), int(rank_slate(judge)[0])))
    for _ in range(400):  # plus synthetic slates with arbitrary values
        k = int(rng.integers(2, 9))
        records.append(SlateRecord(tuple(rng.random(k)), int(rng.integers(0, k))))
    harm = Fraction(0)
    for r in records:
        m = slate_metrics(r)
        best, base = max(Fraction(v) for v in r.oracle), Fraction(r.oracle[0])
        bad += m["headroom"] + m["regret"] != best - base
        bad += m["harm_mag"] != max(Fraction(0), -m["headroom"])
        harm += max(Fraction(0), -m["headroom"])
    d = judge_diagnostics(records)
    bad += d.harm_mag != float(harm / len(records))
    report(5, bad == 0, f"{len(records)} slates, {bad} identity violations")


# ---------------------------------------------------------------------------
# 6


def blobs(rng, multilabel):
    h, w = 24, 24
    yy, xx = np.mgrid[:h, :w]

    def layer(C):
        lab = np.zeros((h, w), dtype=np.int64)
        for _ in range(int(rng.integers(2, 7))):
            r = rng.uniform(1.5, 6)
            lab[(yy - rng.integers(0, h)) ** 2 + (xx - rng.integers(0, w)) ** 2 <= r * r] = rng.integers(1, C)
        lab[rng.random((h, w)) < 0.08] = 0
        return lab

    if multilabel:
        return Mask(np.stack([layer(2) > 0 for _ in range(3)], axis=2).astype(np.uint8), 3, multilabel=True)
    return Mask(layer(4), 4)


def test_criterion_6_morphology(report):
    rng = np.random.default_rng(6)
    fails = {"idempotent": 0, "largest_cc": 0, "non_background": 0, "sdf_zero": 0}
    n = 0
    for i in range(150):
        y = blobs(rng, multilabel=i % 3 == 2)
        n += 1
        once = fill_holes(y, 0.1)
        fails["idempotent"] += not once.same_as(fill_holes(once, 0.1))
        big = fill_holes(y, 1.0)
        fails["idempotent"] += not big.same_as(fill_holes(big, 1.0))
        cc = keep_largest_component(y)
        fails["largest_cc"] += any(ndimage.label(cc.binary(c), structure=FOUR)[1] > 1 for c in cc.foreground_classes())
        if not y.multilabel:
            changed = big.labels != y.labels
            fails["non_background"] += bool(np.any(y.labels[changed] != 0))
        fails["sdf_zero"] += not sdf_offset_proposal(y, 0.0).same_as(y)
    report(6, not any(fails.values()), f"{n} random masks, failures {fails}")


# ---------------------------------------------------------------------------
# 7 and 8


@pytest.fixture(scope="module")
def trend_runs():
    t0 = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        w = world(seed)
        s = w["split"]
        for judge_name, judge in (("weak", w["judge"]), ("oracle", JudgeSpec("oracle"))):
            for method in ("dpo", "rn_dpo"):
                lr, beta = HPARAMS[judge_name, method]
                cfg = P.FinetuneConfig(method=method, epochs=TREND_EPOCHS, lr=lr, beta=beta, seed=seed)
                rec, _ = P.finetune(w["base"], judge, MinerSpec("top_vs_random"), s.pref, s.val, s.test, cfg)
                runs[seed, judge_name, method] = rec
    return runs, time.perf_counter() - t0


def test_criterion_7_trend_reproduction(report, trend_runs):
    runs, dt = trend_runs
    mean = lambda xs: math.fsum(xs) / len(xs)
    calib = {s: world(s)["harm_top"] for s in SEEDS}
    setup = sum(world(s)["seconds"] for s in SEEDS)
    base_test = mean([runs[s, "weak", "dpo"].base_test_iou for s in SEEDS])
    tail = {(j, m): mean([runs[s, j, m].tail_avg for s in SEEDS]) for j in ("weak", "oracle") for m in ("dpo", "rn_dpo")}
    peak = {(j, m): mean([runs[s, j, m].peak_iou for s in SEEDS]) for j in ("weak", "oracle") for m in ("dpo", "rn_dpo")}
    checks = {
        "judge in band": all(h is not None and JUDGE_BAND[0] <= h <= JUDGE_BAND[1] for h in calib.values()),
        "a": tail["weak", "rn_dpo"] >= tail["weak", "dpo"] + 0.01,
        "b": peak["weak", "rn_dpo"] >= base_test,
        "c": peak["oracle", "dpo"] > base_test and peak["oracle", "rn_dpo"] > base_test and tail["oracle", "rn_dpo"] >= tail["oracle", "dpo"],
        "runtime": dt + setup <= 3600,
    }
    detail = (
        f"HarmTop {calib}; base test {base_test:.4f}; "
        f"weak tail dpo {tail['weak', 'dpo']:.4f} rn {tail['weak', 'rn_dpo']:.4f}, peak rn {peak['weak', 'rn_dpo']:.4f}; "
        f"oracle peak dpo {peak['oracle', 'dpo']:.4f} rn {peak['oracle', 'rn_dpo']:.4f}, "
        f"tail dpo {tail['oracle', 'dpo']:.4f} rn {tail['oracle', 'rn_dpo']:.4f}; "
        f"{(dt + setup) / 60:.1f} min; checks {checks}"
    )
    report(7, all(checks.values()), detail)


def test_criterion_8_harmful_mass_dynamics(report, trend_runs):
    runs, _ = trend_runs
    wins, slopes = 0, {}
    for s in SEEDS:
        d = least_squares_slope(normalize_series(runs[s, "weak", "dpo"].harm_series))
        r = least_squares_slope(normalize_series(runs[s, "weak", "rn_dpo"].harm_series))
        slopes[s] = (d, r)
        wins += d is not None and r is not None and d > r
    detail = "; ".join(f"seed {s}: dpo {d} rn {r}" for s, (d, r) in slopes.items())
    report(8, wins >= 2, f"DPO steeper in {wins}/3 seeds ({detail})")


# ---------------------------------------------------------------------------
# 9


def longhand_tail(curve):
    v = [Fraction(x) for x in curve]
    n = len(v)
    sm = [(v[0] + v[1]) / 2] + [(v[t - 1] + v[t] + v[t + 1]) / 3 for t in range(1, n - 1)] + [(v[-2] + v[-1]) / 2]
    return sum(sm[-6:]) / 6


def test_criterion_9_metrics(report):
    curves = [
        [0.5] * 8,
        [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        [0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0],
        [0.5, 0.6] * 5,
        [0.0] * 7 + [1.0],
        [1.0] + [0.0] * 7,
        [0.25, 0.75, 0.125, 0.875, 0.5, 0.5, 0.3, 0.9, 0.1, 0.6, 0.4],
        [0.3, 0.31, 0.33, 0.36, 0.4, 0.45, 0.51, 0.58, 0.66, 0.75, 0.85, 0.96],
        [0.2 + 0.4 * i / 29 for i in range(30)],
        [0.61, 0.59, 0.62, 0.58, 0.63, 0.57, 0.64, 0.56, 0.65, 0.55, 0.66, 0.54, 0.67, 0.53, 0.68],
    ]
    bad = sum(P.compute_metrics(c, c).tail_avg != float(longhand_tail(c)) for c in curves)
    m = P.compute_metrics([0.2, 0.6, 0.4, 0.6, 0.6], [0.1, 0.5, 0.9, 0.7, 0.8])
    first = (m.peak_epoch, m.peak_iou) == (1, 0.5)
    report(9, bad == 0 and first, f"{len(curves) - bad}/{len(curves)} TailAvg exact, first-argmax peak {first}")


# ---------------------------------------------------------------------------
# 10


def test_criterion_10_determinism(report):
    w = world(0)
    s = w["split"]

    def run(threads):
        lr, beta = HPARAMS["weak", "rn_dpo"]
        cfg = P.FinetuneConfig(method="rn_dpo", epochs=8, lr=lr, beta=beta, seed=0, threads=threads)
        return P.finetune(w["base"], w["judge"], MinerSpec(), s.pref, s.val, s.test, cfg)[0]

    a, b, c = run(1), run(1), run(8)
    same_csv = P.curve_csv(a) == P.curve_csv(b)
    same_metrics = (a.peak_iou, a.peak_epoch, a.tail_avg, a.final_digest) == (c.peak_iou, c.peak_epoch, c.tail_avg, c.final_digest)
    report(10, same_csv and same_metrics, f"repeat curve.csv identical {same_csv}, 1 vs 8 threads identical {same_metrics}")


# ---------------------------------------------------------------------------
# 11


def test_criterion_11_round_trips(report, tmp_path):
    rng = np.random.default_rng(11)
    bad_trip, crashes, n_corrupt = 0, [], 0
    blobs_ = []
    for mode, C in (("multiclass", 4), ("multilabel", 3)):
        ds = generate(DatasetSpec(mode=mode, num_classes=C, counts={"train": 3, "val": 0, "test": 0, "qc": 0}, seed=11))
        for smp in ds["train"]:
            path = tmp_path / f"{smp.sample_id}.psmp"
            write_sample(smp, path)
            raw = path.read_bytes()
            back = read_sample(path)
            write_sample(back, tmp_path / "again.psmp")
            bad_trip += not (back.equals(smp) and (tmp_path / "again.psmp").read_bytes() == raw)
            blobs_.append((raw, sample_from_bytes))
    for arch in (Architecture(1, 4, (4, 6, 8), 0.1), Architecture()):
        path = tmp_path / "m.pseg"
        save_checkpoint(init_params(arch, 3), path)
        raw = path.read_bytes()
        save_checkpoint(load_checkpoint(path), tmp_path / "again.pseg")
        bad_trip += (tmp_path / "again.pseg").read_bytes() != raw
        blobs_.append((raw, checkpoint_from_bytes))
    for raw, parse in blobs_:
        cuts = [raw[:k] for k in sorted(set(rng.integers(0, len(raw), 40).tolist()) | {0, 1, 4, 7})]
        flips = []
        for pos in list(range(min(48, len(raw)))) + rng.integers(0, len(raw), 40).tolist():
            b = bytearray(raw)
            b[pos] ^= 1 << int(rng.integers(0, 8))
            flips.append(bytes(b))
        for bad in cuts + flips + [raw + b"\x00", b"\xff" * 64]:
            n_corrupt += 1
            try:
                parse(bad)
            except FormatError:
                pass
            except Exception as e:  # anything else is a crash
                crashes.append(type(e).__name__)
    ok = bad_trip == 0 and not crashes
    report(11, ok, f"{len(blobs_)} files byte-exact: {bad_trip == 0}; {n_corrupt} corruptions, uncategorized errors: {sorted(set(crashes)) or 'none'}")
