"""Learning-rate x beta sweep for DPO and RN-DPO, weak judge and oracle.

Each cell fine-tunes for 30 epochs and is scored by
(max validation IoU + validation TailAvg) / 2; test IoU plays no part in the
choice. The two losses tend to prefer different learning-rate scales, which
is why the acceptance suite fixes one (lr, beta) per method and judge.

Run: python3 demos/04_grid.py [seed]   (36 fine-tunes, about an hour on one core)
"""

import sys

from prefseg import pipeline as P
from prefseg.judge import JudgeSpec
from prefseg.miner import MinerSpec
from prefseg.synthdata import DatasetSpec, generate

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
split = P.split_regime(generate(DatasetSpec()), P.RegimeSpec(), seed)
base = P.train_base(split.seg, split.val, P.BaseConfig(), seed=seed).params
weak, _, _ = P.calibrate_judge(base, split.qc, split.val, (3, 5, 8, 12), cfg=P.BaseConfig(epochs=100), seed=seed, sample_epochs=1600)

for judge_name, judge in (("weak", weak), ("oracle", JudgeSpec("oracle"))):
    for method in ("dpo", "rn_dpo"):
        cfg = P.FinetuneConfig(method=method, seed=seed)
        rows, best = P.grid_search(base, judge, MinerSpec(), split.pref, split.val, split.test, cfg, (2e-5, 5e-5, 1e-4), (0.25, 1.0, 1.5))
        print(f"\n{judge_name} judge, {method}")
        for r in rows:
            mark = "  <- selected" if r is best else ""
            print(f"  lr {r['lr']:.0e}  beta {r['beta']:<4}  score {r['score']:.4f}  (test peak {r['peak_iou']:.4f}){mark}")
