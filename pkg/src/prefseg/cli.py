"""``prefseg`` command line: data generation, both training stages, evaluation,
slate dumps, judge diagnostics and the learning-rate x beta grid.

Every subcommand takes ``--config`` (strict JSON, unknown keys rejected),
``--seed``, ``--out`` and ``--threads`` (falls back to ``PREFSEG_THREADS``).

Exit codes: 0 success, 1 invalid configuration, 2 usage error, 3 malformed
input file, 4 missing file, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from . import pipeline as P
from .diagnostics import judge_diagnostics, least_squares_slope, normalize_series
from .errors import ConfigError, FormatError
from .judge import JudgeSpec, rank_slate, score_slate
from .miner import MinerSpec
from .model import Architecture, init_params, load_checkpoint, save_checkpoint
from .proposals import ProposalConfig, generate_slate
from .synthdata import DatasetSpec, Sample, generate, read_dataset, write_dataset, write_sample

EXIT_OK, EXIT_CONFIG, EXIT_USAGE, EXIT_FORMAT, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5


# ---------------------------------------------------------------------------
# config schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetCfg(_Strict):
    mode: Literal["multiclass", "multilabel"] = "multiclass"
    num_classes: Optional[int] = None
    height: int = 48
    width: int = 48
    counts: dict = Field(default_factory=lambda: {"train": 200, "val": 40, "test": 40, "qc": 20})
    noise: float = 0.3
    bias_field: float = 0.15
    max_distractors: int = 2
    seed: int = 0

    def to_spec(self) -> DatasetSpec:
        d = self.model_dump()
        if d["num_classes"] is None:
            d["num_classes"] = 4 if self.mode == "multiclass" else 3
        spec = DatasetSpec.from_dict(d)
        spec.validate()
        return spec


class RegimeCfg(_Strict):
    n_seg: int = 12
    n_pref: int = 64
    n_qc: int = 20
    base_strength: Literal["weak", "strong"] = "weak"
    judge_strength: Literal["weak", "strong"] = "weak"
    seeds: List[int] = [0, 1, 2]


class ArchCfg(_Strict):
    widths: Tuple[int, int, int] = (8, 16, 32)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)


class BaseCfg(_Strict):
    epochs: int = Field(200, ge=0)
    lr: float = Field(3e-3, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(8, ge=1)
    augment: bool = True
    arch: ArchCfg = Field(default_factory=ArchCfg)


class JudgeCfg(_Strict):
    kind: Literal["model", "ensemble", "oracle", "regressor"] = "model"
    n_qc: Optional[int] = None  # None: calibrate over `budgets`
    budgets: List[int] = [3, 5, 8, 12]
    band: Tuple[float, float] = (0.2, 0.4)
    members: int = Field(3, ge=2)
    epochs: int = Field(100, ge=0)
    sample_epochs: int = Field(1600, ge=0)  # calibration: epochs = max(epochs, sample_epochs // n_qc)
    lr: float = 3e-3
    checkpoint: Optional[str] = None


class ProposalCfg(_Strict):
    K: int = Field(8, ge=2)
    hole_cap: float = Field(0.1, ge=0)
    topology: bool = True
    mc_passes: int = Field(4, ge=0)
    mc_mean: bool = True
    tta: List[Tuple[str, float]] = [("gamma", 0.8), ("gamma", 1.25), ("contrast", 1.2)]
    area_scales: List[float] = [0.7, 0.85, 0.93, 1.07, 1.15, 1.3]
    logit_biases: List[float] = [-1.0, -0.5, -0.25, 0.25, 0.5, 1.0]
    bias_classes: Optional[List[int]] = None
    sdf_offsets: List[float] = [-2.0, -1.0, 1.0, 2.0]
    compositions: bool = True
    composition_offsets: List[float] = [-1.0, 1.0]

    def to_config(self) -> ProposalConfig:
        d = self.model_dump()
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(tuple(x) if isinstance(x, (list, tuple)) else x for x in v)
        return ProposalConfig(**d)


class MinerCfg(_Strict):
    kind: Literal["top_vs_base", "top_vs_random", "threshold", "random"] = "top_vs_random"
    tau: float = Field(0.05, gt=0)


class FinetuneCfg(_Strict):
    method: Literal["dpo", "rn_dpo", "ipo", "rdpo", "pseudolabel", "select_best"] = "rn_dpo"
    epochs: int = Field(30, ge=0)
    lr: float = Field(1e-4, ge=0)
    beta: float = Field(1.0, gt=0)
    ipo_tau: float = Field(1.0, gt=0)
    rdpo_epsilon: float = Field(0.2, ge=0, lt=0.5)
    batch_size: int = Field(8, ge=1)


class GridCfg(_Strict):
    lrs: List[float] = [2e-5, 5e-5, 1e-4]
    betas: List[float] = [0.25, 1.0, 1.5]


class ExperimentConfig(_Strict):
    dataset: DatasetCfg = Field(default_factory=DatasetCfg)
    regime: RegimeCfg = Field(default_factory=RegimeCfg)
    base: BaseCfg = Field(default_factory=BaseCfg)
    judge: JudgeCfg = Field(default_factory=JudgeCfg)
    proposals: ProposalCfg = Field(default_factory=ProposalCfg)
    miner: MinerCfg = Field(default_factory=MinerCfg)
    finetune: FinetuneCfg = Field(default_factory=FinetuneCfg)
    grid: GridCfg = Field(default_factory=GridCfg)


def load_config(path: Optional[str]) -> Tuple[ExperimentConfig, str]:
    """Parse and validate a config file; returns the model and the raw text."""
    if path is None:
        return ExperimentConfig(), "{}"
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    try:
        return ExperimentConfig.model_validate(raw), text
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"{loc}: {err['msg']}") from None


# ---------------------------------------------------------------------------
# helpers


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("PREFSEG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"PREFSEG_THREADS: not an integer: {env!r}") from None
    return 1


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, text: str) -> None:
    (out / "config.json").write_text(text)


def _base_cfg(cfg: ExperimentConfig, num_classes: int) -> P.BaseConfig:
    b = cfg.base
    arch = Architecture(num_classes=num_classes, widths=b.arch.widths, dropout=b.arch.dropout)
    return P.BaseConfig(b.epochs, b.lr, b.weight_decay, b.batch_size, b.augment, arch)


def _regime(cfg: ExperimentConfig) -> P.RegimeSpec:
    r = cfg.regime
    return P.RegimeSpec(r.n_seg, r.n_pref, r.n_qc, r.base_strength, r.judge_strength, tuple(r.seeds))


def _dataset(args, cfg):
    if args.data is None:
        return generate(cfg.dataset.to_spec())
    return read_dataset(args.data)


def _need(path, what):
    if path is None:
        raise ConfigError(f"--{what} is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what}: {path}")
    return path


def _build_judge(cfg: ExperimentConfig, split, base, ds, seed, threads):
    j = cfg.judge
    bcfg = _base_cfg(cfg, ds.num_classes)
    jcfg = P.BaseConfig(j.epochs, j.lr, bcfg.weight_decay, bcfg.batch_size, bcfg.augment, bcfg.arch)
    pcfg = cfg.proposals.to_config()
    info = {"kind": j.kind}
    if j.kind == "oracle":
        return JudgeSpec("oracle"), info
    if j.checkpoint:
        params = load_checkpoint(_need(j.checkpoint, "judge.checkpoint"))
        return JudgeSpec("model", params=params), info
    if j.kind == "model":
        if j.n_qc is None:
            judge, ht, table = P.calibrate_judge(base, split.qc, split.val, j.budgets, tuple(j.band), jcfg, pcfg, seed, threads, j.sample_epochs)
            info.update(n_qc=judge.n_qc, harm_top=ht, calibration=table)
            return judge, info
        info["n_qc"] = j.n_qc
        return P.train_judge(split.qc[: j.n_qc], split.val, jcfg, seed=seed, threads=threads), info
    n = j.n_qc if j.n_qc is not None else len(split.qc)
    info["n_qc"] = n
    if j.kind == "ensemble":
        return P.train_ensemble(split.qc[:n], split.val, j.members, jcfg, seed, threads), info
    return P.train_regressor(split.qc[:n], base, pcfg, seed), info


def _finetune_cfg(cfg: ExperimentConfig, seed, threads, method=None) -> P.FinetuneConfig:
    f = cfg.finetune
    return P.FinetuneConfig(
        method=method or f.method,
        epochs=f.epochs,
        lr=f.lr,
        beta=f.beta,
        ipo_tau=f.ipo_tau,
        rdpo_epsilon=f.rdpo_epsilon,
        batch_size=f.batch_size,
        proposals=cfg.proposals.to_config(),
        seed=seed,
        threads=threads,
    )


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    upd = cfg.model_copy(deep=True)
    if getattr(args, "loss", None):
        upd.finetune.method = args.loss
    if getattr(args, "judge", None):
        upd.judge.kind = args.judge
    if getattr(args, "miner", None):
        upd.miner.kind = args.miner
    if getattr(args, "epochs", None) is not None:
        upd.finetune.epochs = args.epochs
    return ExperimentConfig.model_validate(upd.model_dump())


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg, text):
    out = _out(args)
    spec = cfg.dataset.to_spec()
    if args.seed is not None:
        spec = DatasetSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    ds = generate(spec)
    write_dataset(ds, out)
    _echo(out, text)
    print(json.dumps({split: len(ds[split]) for split in ds.splits}))


def cmd_train_base(args, cfg, text):
    out = _out(args)
    threads = _threads(args)
    ds = _dataset(args, cfg)
    seed = args.seed if args.seed is not None else cfg.regime.seeds[0]
    split = P.split_regime(ds, _regime(cfg), seed)
    res = P.train_base(split.seg, split.val, _base_cfg(cfg, ds.num_classes), seed, threads, out / "base.pseg")
    test = P.evaluate(res.params, split.test, threads)
    info = {
        "version": __version__,
        "seed": seed,
        "best_epoch": res.best_epoch,
        "best_val_iou": res.best_val,
        "test_iou": test,
        "val_curve": res.val_curve,
        "config": json.loads(text),
    }
    (out / "base.json").write_text(json.dumps(info, indent=2))
    _echo(out, text)
    print(json.dumps({"checkpoint": str(out / "base.pseg"), "best_val_iou": res.best_val, "test_iou": test}))


def _load_base(args, ds, cfg):
    if args.base is None:
        return init_params(_base_cfg(cfg, ds.num_classes).arch, 0)
    return load_checkpoint(_need(args.base, "base"))


def cmd_finetune(args, cfg, text):
    cfg = _apply_overrides(cfg, args)
    out = _out(args)
    threads = _threads(args)
    ds = _dataset(args, cfg)
    seed = args.seed if args.seed is not None else cfg.regime.seeds[0]
    split = P.split_regime(ds, _regime(cfg), seed)
    base = _load_base(args, ds, cfg)
    judge, jinfo = _build_judge(cfg, split, base, ds, seed, threads)
    fcfg = _finetune_cfg(cfg, seed, threads)
    miner = MinerSpec(cfg.miner.kind, cfg.miner.tau)

    def progress(row):
        if not args.quiet:
            print(f"epoch {row.epoch:3d}  val {row.val_iou:.4f}  test {row.test_iou:.4f}  pairs {row.pairs_emitted}", file=sys.stderr)

    rec, params = P.finetune(base, judge, miner, split.pref, split.val, split.test, fcfg, on_epoch=progress)
    save_checkpoint(params, out / "final.pseg")
    P.write_run(rec, out, {"judge_info": jinfo, "seed": seed, "config_text": json.loads(text)})
    _echo(out, text)
    print(json.dumps({"peak_iou": rec.peak_iou, "tail_avg": rec.tail_avg, "base_test_iou": rec.base_test_iou}))


def cmd_evaluate(args, cfg, text):
    threads = _threads(args)
    ds = _dataset(args, cfg)
    params = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    res = {split: P.evaluate(params, ds[split], threads) for split in args.splits if ds[split]}
    print(json.dumps(res))
    if args.out:
        out = _out(args)
        (out / "eval.json").write_text(json.dumps(res, indent=2))


def cmd_propose(args, cfg, text):
    out = _out(args)
    threads = _threads(args)
    ds = _dataset(args, cfg)
    params = _load_base(args, ds, cfg) if args.checkpoint is None else load_checkpoint(_need(args.checkpoint, "checkpoint"))
    pcfg = cfg.proposals.to_config()
    seed = args.seed or 0
    samples = ds[args.split][: args.limit] if args.limit else ds[args.split]
    manifest = {"version": __version__, "split": args.split, "seed": seed, "slates": []}
    for s in samples:
        slate = generate_slate(params, s.image, pcfg, seed, s.mask.multilabel, s.sample_id)
        scores = score_slate(JudgeSpec("oracle"), s.image, slate, s.mask)
        d = out / s.sample_id
        d.mkdir(exist_ok=True)
        entries = []
        for k, (m, tag) in enumerate(zip(slate.masks, slate.tags)):
            name = f"{k:02d}.psmp"
            write_sample(Sample(s.image, m, f"{s.sample_id}/{k}"), d / name)
            entries.append({"file": f"{s.sample_id}/{name}", "tag": tag, "oracle_iou": float(scores[k])})
        manifest["slates"].append({"image_id": s.sample_id, "proposals": entries})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    _echo(out, text)
    print(json.dumps({"slates": len(manifest["slates"])}))


def cmd_diagnose(args, cfg, text):
    cfg = _apply_overrides(cfg, args)
    out = _out(args)
    threads = _threads(args)
    ds = _dataset(args, cfg)
    seed = args.seed if args.seed is not None else cfg.regime.seeds[0]
    split = P.split_regime(ds, _regime(cfg), seed)
    base = _load_base(args, ds, cfg)
    judge, jinfo = _build_judge(cfg, split, base, ds, seed, threads)
    miner = MinerSpec(cfg.miner.kind, cfg.miner.tau)
    slates, pairs = P.slate_records(base, judge, split.val, cfg.proposals.to_config(), seed, miner, threads)
    harm = []
    if args.run:
        harm = [r.H for r in P.read_curve(Path(args.run) / "curve.csv")]
    rec = judge_diagnostics(slates, pairs, harm)
    payload = rec.to_dict()
    payload.update(judge=jinfo, harm_slope=least_squares_slope(rec.harm_normalized), version=__version__)
    (out / "diagnostics.json").write_text(json.dumps(payload, indent=2))
    with open(out / "harm_curve.csv", "w", newline="") as fh:
        fh.write("# prefseg harm curve v1: epoch,H,H_normalized\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "H", "H_normalized"])
        for i, (h, hn) in enumerate(zip(rec.harm_series, rec.harm_normalized)):
            w.writerow([i, "" if h is None else repr(h), "" if hn is None else repr(hn)])
    _echo(out, text)
    print(json.dumps({k: payload[k] for k in ("harm_top", "harm_mag", "headroom", "regret", "pair_flip")}))


def cmd_grid(args, cfg, text):
    cfg = _apply_overrides(cfg, args)
    out = _out(args)
    threads = _threads(args)
    ds = _dataset(args, cfg)
    seed = args.seed if args.seed is not None else cfg.regime.seeds[0]
    split = P.split_regime(ds, _regime(cfg), seed)
    base = _load_base(args, ds, cfg)
    judge, jinfo = _build_judge(cfg, split, base, ds, seed, threads)
    miner = MinerSpec(cfg.miner.kind, cfg.miner.tau)
    rows, best = P.grid_search(
        base, judge, miner, split.pref, split.val, split.test, _finetune_cfg(cfg, seed, threads), cfg.grid.lrs, cfg.grid.betas
    )
    (out / "grid.json").write_text(json.dumps({"rows": rows, "best": best, "judge": jinfo, "version": __version__}, indent=2))
    _echo(out, text)
    print(json.dumps({"best": best}))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="label-draw / run seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (default: $PREFSEG_THREADS or 1)")
    common.add_argument("--data", help="dataset directory written by gen-data (default: generate from config)")

    p = argparse.ArgumentParser(prog="prefseg", description="Preference fine-tuning for segmentation on synthetic data.")
    p.add_argument("--version", action="version", version=f"prefseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.set_defaults(func=cmd_gen_data, needs_out=True)

    t = sub.add_parser("train-base", parents=[common], help="stage 1: supervised base segmenter")
    t.set_defaults(func=cmd_train_base, needs_out=True)

    for name, func, help_ in (
        ("finetune", cmd_finetune, "stage 2: preference fine-tuning"),
        ("diagnose", cmd_diagnose, "judge diagnostics and harmful-mass curve"),
        ("grid", cmd_grid, "learning rate x beta sweep"),
    ):
        f = sub.add_parser(name, parents=[common], help=help_)
        f.add_argument("--base", help="stage-1 checkpoint")
        f.add_argument("--loss", choices=P.METHODS)
        f.add_argument("--judge", choices=("model", "ensemble", "oracle", "regressor"))
        f.add_argument("--miner", choices=("top_vs_base", "top_vs_random", "threshold", "random"))
        f.add_argument("--epochs", type=int)
        f.add_argument("--quiet", action="store_true")
        if name == "diagnose":
            f.add_argument("--run", help="finetune output directory whose H curve to include")
        f.set_defaults(func=func, needs_out=True)

    e = sub.add_parser("evaluate", parents=[common], help="mean IoU of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--splits", nargs="+", default=["val", "test"], choices=("train", "val", "test", "qc"))
    e.set_defaults(func=cmd_evaluate, needs_out=False)

    pr = sub.add_parser("propose", parents=[common], help="dump slates with oracle scores")
    pr.add_argument("--checkpoint")
    pr.add_argument("--base", help=argparse.SUPPRESS)
    pr.add_argument("--split", default="val", choices=("train", "val", "test", "qc"))
    pr.add_argument("--limit", type=int, default=0)
    pr.set_defaults(func=cmd_propose, needs_out=True)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    if args.needs_out and not args.out:
        parser.error(f"{args.command}: --out is required")
    try:
        cfg, text = load_config(args.config)
        args.func(args, cfg, text)
    except ConfigError as e:
        print(f"prefseg: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as e:
        print(f"prefseg: format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as e:
        print(f"prefseg: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as e:
        print(f"prefseg: numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
