"""Proposal slates, judges and what the diagnostics say about them.

Trains a small segmenter on a few synthetic images, builds a slate of
candidate masks for each validation image, and compares a judge trained on a
tiny QC budget with the ground-truth oracle. HarmTop is the fraction of
slates where the judge prefers something worse than the model's own
prediction; PairFlip is the fraction of mined pairs whose order is wrong.

Run: python3 demos/02_slates_and_judges.py   (about a minute)
"""

from prefseg import pipeline as P
from prefseg.diagnostics import judge_diagnostics
from prefseg.judge import JudgeSpec
from prefseg.miner import MinerSpec
from prefseg.proposals import ProposalConfig, generate_slate
from prefseg.synthdata import DatasetSpec, generate

ds = generate(DatasetSpec(counts={"train": 24, "val": 12, "test": 4, "qc": 6}))
split = P.split_regime(ds, P.RegimeSpec(n_seg=12, n_pref=8, n_qc=3), seed=0)

base = P.train_base(split.seg, split.val, P.BaseConfig(epochs=60), seed=0)
print(f"base segmenter: val IoU {base.best_val:.3f} (best epoch {base.best_epoch})")

slate = generate_slate(base.params, split.val[0].image, ProposalConfig(), seed=0)
print(f"\none slate, K={slate.K}: {', '.join(slate.tags)}")

weak = P.train_judge(split.qc, split.val, P.BaseConfig(epochs=200), seed=1)
for name, judge in (("weak judge", weak), ("oracle", JudgeSpec("oracle"))):
    slates, pairs = P.slate_records(base.params, judge, split.val, ProposalConfig(), seed=0, miner=MinerSpec())
    d = judge_diagnostics(slates, pairs)
    print(
        f"{name:>10}: HarmTop {d.harm_top:.2f}  Headroom {d.headroom:+.4f}  "
        f"Regret {d.regret:.4f}  PairFlip {d.pair_flip if d.pair_flip is not None else float('nan'):.2f}"
    )
