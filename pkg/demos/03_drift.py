"""DPO versus RN-DPO under a noisy judge, one seed.

Trains the default base segmenter, calibrates a weak judge into the
HarmTop band [0.2, 0.4], then fine-tunes with each loss for 30 epochs and
prints the validation curves and the harmful-mass trend. DPO keeps pushing
on every pair at full strength, so judge mistakes accumulate and the curve
sags; the region-normalized loss saturates on pairs it has already fit.

Run: python3 demos/03_drift.py [seed]   (roughly ten minutes on one core)
"""

import sys

from prefseg import pipeline as P
from prefseg.diagnostics import least_squares_slope, normalize_series
from prefseg.miner import MinerSpec
from prefseg.synthdata import DatasetSpec, generate

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
ds = generate(DatasetSpec())
split = P.split_regime(ds, P.RegimeSpec(), seed)
base = P.train_base(split.seg, split.val, P.BaseConfig(), seed=seed).params
judge, harm_top, table = P.calibrate_judge(
    base, split.qc, split.val, (3, 5, 8, 12), cfg=P.BaseConfig(epochs=100), seed=seed, sample_epochs=1600
)
print(f"judge calibration (n_qc, HarmTop): {table}; using n_qc={judge.n_qc}")

for method in ("dpo", "rn_dpo"):
    cfg = P.FinetuneConfig(method=method, epochs=30, lr=1e-4, seed=seed)
    rec, _ = P.finetune(base, judge, MinerSpec("top_vs_random"), split.pref, split.val, split.test, cfg)
    slope = least_squares_slope(normalize_series(rec.harm_series))
    print(f"\n{method}: base test {rec.base_test_iou:.4f}  peak {rec.peak_iou:.4f}  TailAvg {rec.tail_avg:.4f}  H slope {slope:+.4f}")
    print("  val " + " ".join(f"{v:.3f}" for v in rec.val_curve))
