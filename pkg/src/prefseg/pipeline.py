"""Two-stage training: supervised base segmenter, then preference fine-tuning.

Stage 1 fits the segmenter on a small labeled set and keeps the checkpoint with
the best validation IoU; that checkpoint is frozen as the reference. Stage 2
walks an unlabeled pool once per epoch, builds a slate per image with the
current weights, lets a judge rank it, mines at most one pair and applies the
preference objective in batches of eight pairs.

Determinism: every random draw is keyed by ``(seed, purpose, epoch, image)``
and every batched forward pass has a composition that does not depend on the
thread count, so runs are bit-identical for a fixed seed at any ``threads``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import __version__
from .diagnostics import PairRecord, SlateRecord, harmful_mass, judge_diagnostics
from .errors import ConfigError
from .grid import Mask, iou
from .judge import IoURegressor, JudgeSpec, judge_predictions, rank_slate, score_slate
from .loss import PreferenceLossSpec, batch_pair_loss
from .miner import MinerSpec, mine
from .model import (
    Architecture,
    SegmenterParams,
    batch_supervised_loss,
    forward,
    forward_backward,
    init_params,
    params_digest,
)
from .optim import Schedule, make_optimizer, optimizer_step
from .proposals import DegenerateSlateError, ProposalConfig, base_prediction, generate_slate
from .synthdata import Dataset, Sample

__all__ = [
    "RegimeSpec",
    "RegimeSplit",
    "split_regime",
    "BaseConfig",
    "train_base",
    "evaluate",
    "predict_logits",
    "train_judge",
    "train_ensemble",
    "train_regressor",
    "slate_records",
    "calibrate_judge",
    "FinetuneConfig",
    "EpochRow",
    "RunRecord",
    "finetune",
    "Metrics",
    "compute_metrics",
    "moving_average",
    "selection_score",
    "grid_search",
    "write_run",
    "curve_csv",
    "read_curve",
    "METHODS",
    "CURVE_COLUMNS",
]

METHODS = ("dpo", "rn_dpo", "ipo", "rdpo", "pseudolabel", "select_best")
CURVE_VERSION = 1
CURVE_COLUMNS = ("epoch", "val_iou", "test_iou", "H", "pairs_emitted", "pairs_skipped")
EVAL_CHUNK = 8

# stream tags for seeded draws, so different purposes never share a stream
_S_SPLIT, _S_SHUFFLE, _S_AUG, _S_DROP, _S_SLATE, _S_MINE = 101, 102, 103, 104, 105, 106


def _crc(s: str) -> int:
    return zlib.crc32(s.encode("utf-8"))


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _pmap(fn: Callable, items: Sequence, threads: int = 1) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# regimes


@dataclass(frozen=True)
class RegimeSpec:
    n_seg: int = 12
    n_pref: int = 64
    n_qc: int = 20
    base_strength: str = "weak"
    judge_strength: str = "weak"
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        for name in ("n_seg", "n_pref", "n_qc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"regime.{name}: must be non-negative")
        for name in ("base_strength", "judge_strength"):
            if getattr(self, name) not in ("weak", "strong"):
                raise ConfigError(f"regime.{name}: expected 'weak' or 'strong'")


@dataclass
class RegimeSplit:
    seg: list
    pref: list
    qc: list
    val: list
    test: list

    def check_disjoint(self) -> None:
        seen = {}
        for name in ("seg", "pref", "qc", "val", "test"):
            for s in getattr(self, name):
                if s.sample_id in seen:
                    raise ValueError(f"sample {s.sample_id} is in both {seen[s.sample_id]} and {name}")
                seen[s.sample_id] = name


def split_regime(dataset: Dataset, regime: RegimeSpec, seed: int) -> RegimeSplit:
    """Draw the labeled, preference and judge sets for one label-draw seed.

    ``D_seg`` and ``D_pref`` are disjoint draws from the train split, the judge
    set comes from the QC split, validation and test are used whole.
    """
    train, qc = dataset["train"], dataset["qc"]
    if regime.n_seg + regime.n_pref > len(train):
        raise ConfigError(f"regime: n_seg + n_pref = {regime.n_seg + regime.n_pref} exceeds {len(train)} train samples")
    if regime.n_qc > len(qc):
        raise ConfigError(f"regime.n_qc: {regime.n_qc} exceeds {len(qc)} QC samples")
    perm = _rng(seed, _S_SPLIT, 0).permutation(len(train))
    qperm = _rng(seed, _S_SPLIT, 1).permutation(len(qc))
    split = RegimeSplit(
        seg=[train[i] for i in perm[: regime.n_seg]],
        pref=[train[i] for i in perm[regime.n_seg : regime.n_seg + regime.n_pref]],
        qc=[qc[i] for i in qperm[: regime.n_qc]],
        val=list(dataset["val"]),
        test=list(dataset["test"]),
    )
    split.check_disjoint()
    return split


# ---------------------------------------------------------------------------
# evaluation


def predict_logits(params: SegmenterParams, images: Sequence, threads: int = 1) -> list:
    """Dropout-free logits per image, computed in fixed chunks of eight."""
    chunks = [np.stack(images[i : i + EVAL_CHUNK]) for i in range(0, len(images), EVAL_CHUNK)]
    out = _pmap(lambda x: forward(params, x), chunks, threads)
    return [z for block in out for z in block]


def evaluate(params: SegmenterParams, samples: Sequence[Sample], threads: int = 1) -> float:
    """Mean IoU of the base prediction over ``samples``."""
    if not samples:
        return float("nan")
    logits = predict_logits(params, [s.image for s in samples], threads)
    ml = samples[0].mask.multilabel
    return math.fsum(iou(base_prediction(z, ml), s.mask) for z, s in zip(logits, samples)) / len(samples)


# ---------------------------------------------------------------------------
# stage 1


@dataclass(frozen=True)
class BaseConfig:
    epochs: int = 200
    lr: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    augment: bool = True
    arch: Architecture = field(default_factory=Architecture)


@dataclass
class BaseResult:
    params: SegmenterParams
    val_curve: list
    best_epoch: int
    best_val: float


def augment_pair(image: np.ndarray, labels: np.ndarray, code: int):
    """One of the eight square symmetries: ``code % 4`` quarter turns, then a flip if ``code >= 4``."""
    im = np.rot90(image, code % 4, axes=(0, 1))
    lab = np.rot90(labels, code % 4, axes=(0, 1))
    if code >= 4:
        im, lab = im[:, ::-1], lab[:, ::-1]
    return np.ascontiguousarray(im), np.ascontiguousarray(lab)


def train_base(
    train: Sequence[Sample],
    val: Sequence[Sample],
    cfg: BaseConfig = BaseConfig(),
    seed: int = 0,
    threads: int = 1,
    checkpoint: Optional[Union[str, Path]] = None,
) -> BaseResult:
    """AdamW with cosine-warmup on ``train``; returns the best-validation weights."""
    from .model import save_checkpoint

    params = init_params(cfg.arch, seed)
    best, best_val, best_epoch, curve = params, -1.0, -1, []
    if cfg.epochs > 0 and train:
        steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
        sched = Schedule("cosine", cfg.epochs * steps_per_epoch)
        state = make_optimizer(params, "adamw", cfg.lr, cfg.weight_decay, sched)
        square = train[0].image.shape[0] == train[0].image.shape[1]
        for epoch in range(cfg.epochs):
            order = _rng(seed, _S_SHUFFLE, epoch).permutation(len(train))
            codes = _rng(seed, _S_AUG, epoch).integers(0, 8 if square else 1, len(train))
            for b in range(0, len(train), cfg.batch_size):
                idx = order[b : b + cfg.batch_size]
                images, targets = [], []
                for i in idx:
                    s = train[i]
                    im, lab = augment_pair(s.image, s.mask.labels, int(codes[i]) if cfg.augment else 0)
                    images.append(im)
                    targets.append(Mask(lab, s.mask.num_classes, s.mask.multilabel))
                drop = [[seed, _S_DROP, epoch, int(i)] for i in idx]
                loss, _, grads = forward_backward(params, np.stack(images), batch_supervised_loss(targets), drop)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
                params, state = optimizer_step(state, params, grads)
            v = evaluate(params, val, threads) if val else 0.0
            curve.append(v)
            if v > best_val:
                best, best_val, best_epoch = params.copy(), v, epoch
    if checkpoint is not None:
        save_checkpoint(best, checkpoint)
    return BaseResult(best, curve, best_epoch, best_val if best_epoch >= 0 else float("nan"))


# ---------------------------------------------------------------------------
# judges


def train_judge(qc: Sequence[Sample], val: Sequence[Sample], cfg: BaseConfig = BaseConfig(), seed: int = 0, threads: int = 1) -> JudgeSpec:
    """Model judge: a segmenter trained on the QC budget."""
    res = train_base(qc, val, cfg, seed=seed, threads=threads)
    return JudgeSpec("model", params=res.params, n_qc=len(qc))


def train_ensemble(qc, val, members: int = 3, cfg: BaseConfig = BaseConfig(), seed: int = 0, threads: int = 1) -> JudgeSpec:
    """Ensemble judge: ``members`` segmenters on bootstrap resamples of the QC set."""
    nets = []
    for m in range(members):
        pick = _rng(seed, _S_SPLIT, 7, m).integers(0, len(qc), len(qc))
        nets.append(train_base([qc[i] for i in pick], val, cfg, seed=seed * 1000 + m, threads=threads).params)
    return JudgeSpec("ensemble", members=nets, n_qc=len(qc))


def train_regressor(qc, base: SegmenterParams, pcfg: ProposalConfig = ProposalConfig(), seed: int = 0, ridge: float = 1e-2) -> JudgeSpec:
    """Regressor judge fitted to oracle IoU of base-model slates on the QC set."""
    images, masks, targets = [], [], []
    for s in qc:
        try:
            slate = generate_slate(base, s.image, pcfg, seed, s.mask.multilabel, s.sample_id)
        except DegenerateSlateError:
            continue
        for m in slate.masks:
            images.append(s.image)
            masks.append(m)
            targets.append(iou(m, s.mask))
    if not masks:
        raise ValueError("no proposals to fit the regressor on")
    reg = IoURegressor(ridge=ridge).fit(images, masks, targets)
    return JudgeSpec("regressor", regressor=reg, n_qc=len(qc))


def _judge_cache(judge: JudgeSpec, samples, threads=1) -> dict:
    if judge.kind not in ("model", "ensemble"):
        return {}
    nets = [judge.params] if judge.kind == "model" else list(judge.members)
    per_net = [predict_logits(p, [s.image for s in samples], threads) for p in nets]
    out = {}
    for i, s in enumerate(samples):
        out[s.sample_id] = [base_prediction(z[i], s.mask.multilabel) for z in per_net]
    return out


def _slate_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed), _S_SLATE, int(epoch)]).generate_state(1)[0])


def _score(judge, sample, slate, cache):
    return score_slate(judge, sample.image, slate, sample.mask, cache.get(sample.sample_id))


def slate_records(
    params: SegmenterParams,
    judge: JudgeSpec,
    samples: Sequence[Sample],
    pcfg: ProposalConfig = ProposalConfig(),
    seed: int = 0,
    miner: Optional[MinerSpec] = None,
    threads: int = 1,
    cache: Optional[dict] = None,
):
    """Slates of ``params`` on ``samples`` with oracle IoUs and the judge's pick.

    Returns ``(slate_records, pair_records)``; pairs are mined only when
    ``miner`` is given and carry weight 1.
    """
    cache = _judge_cache(judge, samples, threads) if cache is None else cache

    def visit(s):
        try:
            slate = generate_slate(params, s.image, pcfg, seed, s.mask.multilabel, s.sample_id)
        except DegenerateSlateError:
            return None, None
        scores = _score(judge, s, slate, cache)
        ranking = rank_slate(scores)
        oracle = tuple(iou(m, s.mask) for m in slate.masks)
        rec = SlateRecord(oracle, int(ranking[0]), s.sample_id)
        pr = None
        if miner is not None:
            got = mine(miner, slate, scores, ranking, [seed, _S_MINE, _crc(s.sample_id)])
            if got:
                pr = PairRecord(oracle[got[0].index_plus], oracle[got[0].index_minus], 1.0, s.sample_id)
        return rec, pr

    out = _pmap(visit, list(samples), threads)
    return [r for r, _ in out if r is not None], [p for _, p in out if p is not None]


def calibrate_judge(
    base: SegmenterParams,
    qc: Sequence[Sample],
    val: Sequence[Sample],
    budgets: Sequence[int],
    band: tuple = (0.2, 0.4),
    cfg: BaseConfig = BaseConfig(),
    pcfg: ProposalConfig = ProposalConfig(),
    seed: int = 0,
    threads: int = 1,
    sample_epochs: int = 0,
):
    """Pick the first QC budget whose judge has HarmTop inside ``band`` on ``val``.

    Each judge trains for ``max(cfg.epochs, sample_epochs // n)`` epochs, so a
    positive ``sample_epochs`` keeps the number of sample visits roughly fixed
    across budgets. Falls back to the budget closest to the band's midpoint.
    Returns ``(judge, harm_top, table)`` with ``table`` a list of
    ``(n_qc, harm_top)``.
    """
    table, judges = [], []
    lo, hi = band
    for n in budgets:
        jcfg = replace(cfg, epochs=max(cfg.epochs, sample_epochs // max(n, 1)))
        j = train_judge(list(qc)[:n], val, jcfg, seed=seed + 100 + n, threads=threads)
        recs, _ = slate_records(base, j, val, pcfg, seed, threads=threads)
        ht = judge_diagnostics(recs).harm_top
        table.append((n, ht))
        judges.append(j)
        if ht is not None and lo <= ht <= hi:
            return j, ht, table
    mid = 0.5 * (lo + hi)
    k = min(range(len(table)), key=lambda i: abs((table[i][1] if table[i][1] is not None else 9.0) - mid))
    return judges[k], table[k][1], table


# ---------------------------------------------------------------------------
# stage 2


@dataclass(frozen=True)
class FinetuneConfig:
    method: str = "rn_dpo"
    epochs: int = 30
    lr: float = 1e-4
    beta: float = 1.0
    ipo_tau: float = 1.0
    rdpo_epsilon: float = 0.2
    batch_size: int = 8
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"finetune.method: unknown method {self.method!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("finetune: epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigError("finetune.lr: must be non-negative")

    def loss_spec(self) -> Optional[PreferenceLossSpec]:
        if self.method in ("pseudolabel", "select_best"):
            return None
        return PreferenceLossSpec(self.method, self.beta, self.ipo_tau, self.rdpo_epsilon)


@dataclass
class EpochRow:
    epoch: int
    val_iou: float
    test_iou: float
    H: Optional[float]
    pairs_emitted: int
    pairs_skipped: int


@dataclass
class RunRecord:
    method: str
    config: dict
    base_val_iou: float
    base_test_iou: float
    rows: list = field(default_factory=list)
    peak_iou: Optional[float] = None
    peak_epoch: Optional[int] = None
    tail_avg: Optional[float] = None
    reference_digest: str = ""
    final_digest: str = ""
    pairs: list = field(default_factory=list)  # per epoch: list of PairRecord
    version: str = __version__

    @property
    def val_curve(self) -> list:
        return [r.val_iou for r in self.rows]

    @property
    def test_curve(self) -> list:
        return [r.test_iou for r in self.rows]

    @property
    def harm_series(self) -> list:
        return [r.H for r in self.rows]

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("rows", "pairs")}
        d["curve"] = [asdict(r) for r in self.rows]
        return d


def _visit(params, judge, miner, pcfg, sample, cache, seed, epoch):
    """Slate, rank and mine one pool image. Returns ``(pair or None, top mask or None)``."""
    try:
        slate = generate_slate(params, sample.image, pcfg, _slate_seed(seed, epoch), sample.mask.multilabel, sample.sample_id)
    except DegenerateSlateError:
        return None, None
    scores = _score(judge, sample, slate, cache)
    ranking = rank_slate(scores)
    got = mine(miner, slate, scores, ranking, [seed, _S_MINE, epoch, _crc(sample.sample_id)])
    return (got[0] if got else None), slate.masks[int(ranking[0])]


def finetune(
    base: SegmenterParams,
    judge: JudgeSpec,
    miner: MinerSpec,
    pool: Sequence[Sample],
    val: Sequence[Sample],
    test: Sequence[Sample],
    cfg: FinetuneConfig = FinetuneConfig(),
    on_epoch: Optional[Callable[[EpochRow], None]] = None,
):
    """Stage-2 loop. Returns ``(RunRecord, final params)``.

    Ground-truth masks of the pool are read only by the oracle judge and by
    the harmful-mass bookkeeping.
    """
    threads = cfg.threads
    ref = base.copy()
    ref_digest = params_digest(ref)
    params = base.copy()
    spec = cfg.loss_spec()
    state = make_optimizer(params, "adam", cfg.lr, 0.0, Schedule("constant"))
    pool = list(pool)
    record = RunRecord(
        method=cfg.method,
        config=_config_echo(cfg, miner, judge),
        base_val_iou=evaluate(base, val, threads),
        base_test_iou=evaluate(base, test, threads),
        reference_digest=ref_digest,
    )

    if cfg.method == "select_best":
        return _select_best(base, judge, val, test, cfg, record, on_epoch), params

    cache = _judge_cache(judge, pool, threads)
    zref = dict(zip((s.sample_id for s in pool), predict_logits(ref, [s.image for s in pool], threads)))
    by_id = {s.sample_id: s for s in pool}

    def step(buffer):
        nonlocal params, state
        images = np.stack([by_id[item[0]].image for item in buffer])
        if spec is None:
            fn = batch_supervised_loss([item[1] for item in buffer])
            loss, _, grads = forward_backward(params, images, fn)
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite pseudo-label loss")
            params, state = optimizer_step(state, params, grads)
            return []
        pairs = [item[1] for item in buffer]
        z_ref = np.stack([zref[p.image_id] for p in pairs])
        holder = {}

        def fn(z):
            loss, dz, res = batch_pair_loss(spec, z, z_ref, pairs)
            holder["res"] = res
            return loss, dz

        loss, _, grads = forward_backward(params, images, fn)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite preference loss")
        params, state = optimizer_step(state, params, grads)
        return [
            PairRecord(iou(p.y_plus, by_id[p.image_id].mask), iou(p.y_minus, by_id[p.image_id].mask), r.weight, p.image_id)
            for p, r in zip(pairs, holder["res"])
        ]

    for epoch in range(cfg.epochs):
        order = _rng(cfg.seed, _S_SHUFFLE, epoch).permutation(len(pool))
        buffer, epoch_pairs, emitted, skipped = [], [], 0, 0
        for b in range(0, len(order), cfg.batch_size):
            chunk = [pool[i] for i in order[b : b + cfg.batch_size]]
            visits = _pmap(lambda s: _visit(params, judge, miner, cfg.proposals, s, cache, cfg.seed, epoch), chunk, threads)
            for s, (pair, top) in zip(chunk, visits):
                if spec is None:
                    ok = top is not None
                    if ok:
                        buffer.append((s.sample_id, top))
                else:
                    ok = pair is not None
                    if ok:
                        buffer.append((s.sample_id, pair))
                emitted += ok
                skipped += not ok
            while len(buffer) >= cfg.batch_size:
                epoch_pairs += step(buffer[: cfg.batch_size])
                buffer = buffer[cfg.batch_size :]
        if buffer:
            epoch_pairs += step(buffer)
        if pool and not emitted:
            warnings.warn(f"epoch {epoch}: no usable pairs, parameters unchanged", RuntimeWarning, stacklevel=2)
        row = EpochRow(
            epoch=epoch,
            val_iou=evaluate(params, val, threads),
            test_iou=evaluate(params, test, threads),
            H=harmful_mass(epoch_pairs) if spec is not None else None,
            pairs_emitted=emitted,
            pairs_skipped=skipped,
        )
        record.rows.append(row)
        record.pairs.append(epoch_pairs)
        if on_epoch:
            on_epoch(row)

    if params_digest(ref) != ref_digest:
        raise RuntimeError("reference model was modified during fine-tuning")
    _finish(record, params)
    return record, params


def _select_best(base, judge, val, test, cfg, record, on_epoch):
    """Judge-top proposals of the frozen base model, scored by oracle IoU."""
    vcache = _judge_cache(judge, val, cfg.threads)
    tcache = _judge_cache(judge, test, cfg.threads)
    for epoch in range(cfg.epochs):
        seed = _slate_seed(cfg.seed, epoch)
        vr, _ = slate_records(base, judge, val, cfg.proposals, seed, threads=cfg.threads, cache=vcache)
        tr, _ = slate_records(base, judge, test, cfg.proposals, seed, threads=cfg.threads, cache=tcache)
        row = EpochRow(
            epoch,
            math.fsum(r.oracle[r.top] for r in vr) / max(len(val), 1) if vr else 0.0,
            math.fsum(r.oracle[r.top] for r in tr) / max(len(test), 1) if tr else 0.0,
            None,
            0,
            0,
        )
        record.rows.append(row)
        record.pairs.append([])
        if on_epoch:
            on_epoch(row)
    _finish(record, base)
    return record


def _finish(record: RunRecord, params: SegmenterParams) -> None:
    record.final_digest = params_digest(params)
    if record.rows:
        m = compute_metrics(record.val_curve, record.test_curve)
        record.peak_iou, record.peak_epoch, record.tail_avg = m.peak_iou, m.peak_epoch, m.tail_avg


def _config_echo(cfg: FinetuneConfig, miner: MinerSpec, judge: JudgeSpec) -> dict:
    d = asdict(cfg)
    d["proposals"] = asdict(cfg.proposals)
    d["miner"] = asdict(miner)
    d["judge"] = {"kind": judge.kind, "n_qc": judge.n_qc}
    return d


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    peak_iou: float
    peak_epoch: int
    tail_avg: Optional[float]


def moving_average(curve: Sequence[float], window: int = 3) -> list:
    """Centered moving average as exact fractions; windows are truncated at the ends."""
    vals = [Fraction(float(v)) for v in curve]
    half = window // 2
    out = []
    for t in range(len(vals)):
        w = vals[max(0, t - half) : t + half + 1]
        out.append(sum(w) / len(w))
    return out


def compute_metrics(val_curve: Sequence[float], test_curve: Sequence[float], tail: int = 6, window: int = 3) -> Metrics:
    """Peak IoU (test IoU at the first validation argmax) and TailAvg.

    TailAvg is the mean of the last ``tail`` points of the smoothed validation
    curve and is ``None`` for curves shorter than ``tail + window - 1``.
    """
    if len(val_curve) != len(test_curve) or not val_curve:
        raise ValueError("validation and test curves must be non-empty and equally long")
    k = int(np.argmax(np.asarray(val_curve, dtype=np.float64)))
    tail_avg = None
    if len(val_curve) >= tail + window - 1:
        tail_avg = float(sum(moving_average(val_curve, window)[-tail:]) / tail)
    return Metrics(float(test_curve[k]), k, tail_avg)


def selection_score(val_curve: Sequence[float], tail: int = 6, window: int = 3) -> Optional[float]:
    """Grid selection score ``(max validation IoU + TailAvg) / 2``; test IoU is never used."""
    m = compute_metrics(val_curve, val_curve, tail, window)
    if m.tail_avg is None:
        return None
    return 0.5 * (m.peak_iou + m.tail_avg)


def grid_search(
    base: SegmenterParams,
    judge: JudgeSpec,
    miner: MinerSpec,
    pool,
    val,
    test,
    cfg: FinetuneConfig,
    lrs: Sequence[float],
    betas: Sequence[float],
):
    """Fine-tune over ``lrs x betas`` and rank by the validation selection score.

    Returns ``(rows, best_row)``; each row is a dict with ``lr``, ``beta``,
    ``val_peak``, ``peak_iou`` (test), ``tail_avg`` and ``score``.
    """
    rows = []
    for lr in lrs:
        for beta in betas:
            rec, _ = finetune(base, judge, miner, pool, val, test, replace(cfg, lr=lr, beta=beta))
            rows.append(
                {
                    "lr": lr,
                    "beta": beta,
                    "val_peak": max(rec.val_curve) if rec.rows else None,
                    "peak_iou": rec.peak_iou,
                    "tail_avg": rec.tail_avg,
                    "score": selection_score(rec.val_curve) if rec.rows else None,
                }
            )
    scored = [r for r in rows if r["score"] is not None]
    best = max(scored, key=lambda r: r["score"]) if scored else None
    return rows, best


# ---------------------------------------------------------------------------
# run outputs


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def curve_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    buf.write(f"# prefseg curve v{CURVE_VERSION}: {','.join(CURVE_COLUMNS)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in record.rows:
        w.writerow([_fmt(getattr(r, c)) for c in CURVE_COLUMNS])
    return buf.getvalue()


def read_curve(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# prefseg curve v"):
        raise ValueError(f"{path}: missing curve header")
    rows = []
    for rec in csv.DictReader(lines[1:]):
        rows.append(
            EpochRow(
                int(rec["epoch"]),
                float(rec["val_iou"]),
                float(rec["test_iou"]),
                float(rec["H"]) if rec["H"] else None,
                int(rec["pairs_emitted"]),
                int(rec["pairs_skipped"]),
            )
        )
    return rows


def write_run(record: RunRecord, out_dir, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = record.to_dict()
    if extra:
        payload.update(extra)
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    (out / "curve.csv").write_text(curve_csv(record))
    return out
