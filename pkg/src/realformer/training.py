"""Masked-LM objective, AdamW, warmup/linear-decay schedule and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import MASK, NUM_SPECIAL, PAD, Corpus, pad_batch
from .model import DataError, ModelConfig, ParameterStore, encode, init_parameters, is_no_decay, mlm_logits
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "train_loss", "dev_loss", "dev_mlm_acc", "diverged")


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, path: str):
        super().__init__(f"non-finite gradient for parameter {path}")
        self.path = path


@dataclass
class TrainingBatch:
    token_ids: np.ndarray        # (B, seq) after masking
    segment_ids: np.ndarray
    input_mask: np.ndarray
    masked_positions: tuple[np.ndarray, np.ndarray]  # (row, col)
    masked_labels: np.ndarray

    @property
    def num_masked(self) -> int:
        return int(self.masked_labels.size)


def mask_tokens(token_ids, rng: np.random.Generator, mask_rate: float = 0.15, *, vocab_size: int,
                segment_ids=None, input_mask=None) -> TrainingBatch:
    """Select ceil(mask_rate * maskable) tokens per row; 80% [MASK], 10% random, 10% kept.

    Special tokens and padding are never selected.
    """
    if not 0.0 < mask_rate < 1.0:
        raise DataError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    ids = np.array(token_ids, dtype=np.int64, ndmin=2)
    if input_mask is None:
        input_mask = (ids != PAD).astype(np.int64)
    if segment_ids is None:
        segment_ids = np.zeros_like(ids)
    out = ids.copy()
    rows, cols = [], []
    for r in range(ids.shape[0]):
        maskable = np.flatnonzero((ids[r] >= NUM_SPECIAL) & (np.asarray(input_mask)[r] > 0))
        if maskable.size == 0:
            raise DataError(f"row {r} has no maskable tokens")
        k = math.ceil(mask_rate * maskable.size)
        chosen = np.sort(rng.choice(maskable, size=k, replace=False))
        rows.append(np.full(k, r))
        cols.append(chosen)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    labels = ids[rows, cols].copy()
    u = rng.random(rows.size)
    random_ids = rng.integers(NUM_SPECIAL, vocab_size, size=rows.size)
    replaced = np.where(u < 0.8, MASK, np.where(u < 0.9, random_ids, labels))
    out[rows, cols] = replaced
    return TrainingBatch(out, np.array(segment_ids, ndmin=2), np.array(input_mask, ndmin=2), (rows, cols), labels)


def mlm_loss(logits: Tensor, labels) -> tuple[Tensor, float]:
    """Mean cross-entropy over masked positions and argmax accuracy."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("no masked positions")
    loss = T.cross_entropy(logits, labels)
    acc = float(np.mean(np.argmax(logits.data, axis=-1) == labels))
    return loss, acc


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    peak_lr: float = 1e-4
    warmup_steps: int = 0
    total_steps: int = 1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        d = asdict(self)
        del d["m"], d["v"]
        return d


def lr_at(step: int, state: OptimizerState) -> float:
    """Linear warmup from 0 to peak, then linear decay to 0 at ``total_steps``."""
    peak, warm, total = state.peak_lr, state.warmup_steps, state.total_steps
    if step <= 0:
        return 0.0 if warm > 0 else peak
    if step >= total:
        return 0.0
    if step < warm:
        return peak * step / warm
    return peak * ((total - step) / (total - warm))


def adamw_step(params: dict, grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float | None = None) -> float:
    """One bias-corrected Adam update with decoupled weight decay, in place on ``params``."""
    for path in params:
        if not np.all(np.isfinite(grads[path])):
            raise NonFiniteGradientError(path)
    state.t += 1
    t = state.t
    if lr is None:
        lr = lr_at(t, state)
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for path, p in params.items():
        g = grads[path]
        m = state.m.get(path)
        v = state.v.get(path)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[path], state.v[path] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and not is_no_decay(path):
            update = update + state.weight_decay * p
        params[path] = p - lr * update
    return lr


# --------------------------------------------------------------------------
# loss / evaluation


def loss_and_grads(store: Mapping[str, np.ndarray], config: ModelConfig, batch: TrainingBatch,
                   rng: np.random.Generator | None = None, *, residual_edge: bool = True):
    """(loss, accuracy, grads) for one batch; ``rng=None`` disables dropout."""
    tape = Tape()
    params = tape.parameters(store)
    out = encode(params, config, batch.token_ids, batch.segment_ids, batch.input_mask, rng,
                 residual_edge=residual_edge)
    logits = mlm_logits(params, config, out.hidden, batch.masked_positions)
    loss, acc = mlm_loss(logits, batch.masked_labels)
    return loss.item(), acc, T.backward(tape, loss)


def batch_loss(store, config: ModelConfig, batch: TrainingBatch) -> tuple[float, float]:
    params = {k: Tensor(v) for k, v in store.items()}
    out = encode(params, config, batch.token_ids, batch.segment_ids, batch.input_mask)
    logits = mlm_logits(params, config, out.hidden, batch.masked_positions)
    loss, acc = mlm_loss(logits, batch.masked_labels)
    return loss.item(), acc


def fixed_masks(seqs: Sequence[Sequence[int]], seed: int, vocab_size: int, *, draws: int = 1,
                mask_rate: float = 0.15, batch_size: int = 64, length: int | None = None) -> list[TrainingBatch]:
    """Deterministic masked batches for evaluation."""
    rng = np.random.default_rng([seed, 7919])
    length = length or max(len(s) for s in seqs)
    batches = []
    for _ in range(draws):
        for i in range(0, len(seqs), batch_size):
            ids, seg, mask = pad_batch(seqs[i:i + batch_size], length)
            batches.append(mask_tokens(ids, rng, mask_rate, vocab_size=vocab_size, segment_ids=seg, input_mask=mask))
    return batches


def evaluate(store, config: ModelConfig, batches: Sequence[TrainingBatch]) -> tuple[float, float]:
    """Masked-position weighted (loss, accuracy) over fixed batches, dropout off."""
    tot_loss = tot_hit = n = 0.0
    for b in batches:
        loss, acc = batch_loss(store, config, b)
        k = b.num_masked
        tot_loss += loss * k
        tot_hit += acc * k
        n += k
    return tot_loss / n, tot_hit / n


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    peak_lr: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    mask_rate: float = 0.15
    eval_every: int = 100
    checkpoint_every: int = 0
    data_seed: int = 0
    eval_draws: int = 1
    eval_split: str = "dev"
    divergence_patience: int = 50

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(peak_lr=self.peak_lr, warmup_steps=self.warmup_steps,
                              total_steps=self.steps, weight_decay=self.weight_decay)


class DivergenceDetector:
    """Flags a run once ``patience`` consecutive losses stay above the first loss.

    A non-finite loss counts as above.  The flag is sticky.
    """

    def __init__(self, patience: int = 50):
        self.patience = patience
        self.initial: float | None = None
        self.streak = 0
        self.flagged_at: int | None = None

    @property
    def diverged(self) -> bool:
        return self.flagged_at is not None

    def update(self, step: int, loss: float) -> bool:
        if self.initial is None and math.isfinite(loss):
            self.initial = loss
            return self.diverged
        if not math.isfinite(loss) or loss > self.initial:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.patience and self.flagged_at is None:
            self.flagged_at = step
            log.warning("divergence flagged at step %d (loss %.4g, initial %.4g)", step, loss, self.initial)
        return self.diverged

    def state(self) -> dict:
        return {"initial": self.initial, "streak": self.streak, "flagged_at": self.flagged_at}

    def load(self, d: Mapping) -> None:
        self.initial, self.streak, self.flagged_at = d["initial"], d["streak"], d["flagged_at"]


@dataclass
class TrainResult:
    store: ParameterStore
    metrics: list[dict]
    step: int
    diverged: bool
    non_finite: bool = False
    diverged_at: int | None = None


def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def _set_rng(g: np.random.Generator, state: dict) -> None:
    g.bit_generator.state = state


def save_training_state(path, store, config, step, opt: OptimizerState, data_rng, dropout_rng,
                        detector: DivergenceDetector, tcfg: TrainConfig) -> None:
    arrays = {}
    for k in store:
        if k in opt.m:
            arrays[f"adam.m/{k}"] = opt.m[k]
            arrays[f"adam.v/{k}"] = opt.v[k]
    save_checkpoint(
        store, config, step, path,
        rng_state={"data": _rng_state(data_rng), "dropout": _rng_state(dropout_rng)},
        extra_arrays=arrays,
        extra={"optimizer": opt.hyperparameters(), "detector": detector.state(), "train": asdict(tcfg)},
    )


def write_metrics(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in METRIC_FIELDS})


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def train(config: ModelConfig, corpus: Corpus, tcfg: TrainConfig, *, out_dir=None, resume=None,
          store: ParameterStore | None = None) -> TrainResult:
    """Train an MLM on ``corpus``.

    Data order and masking draw from ``tcfg.data_seed``; initialization and
    dropout draw from ``config.seed``.  Metrics are logged every
    ``eval_every`` steps and at the final step.  With ``out_dir``, writes
    ``metrics.csv`` and (if ``checkpoint_every``) ``step-<n>.ckpt`` files.
    """
    if not corpus.train:
        raise DataError("corpus has no training sequences")
    train_seqs = corpus.split("train")
    eval_seqs = corpus.split(tcfg.eval_split) or train_seqs
    length = min(config.max_seq_len, corpus.max_len)
    eval_batches = fixed_masks(eval_seqs, tcfg.data_seed, config.vocab_size, draws=tcfg.eval_draws,
                               mask_rate=tcfg.mask_rate, length=length)

    data_rng = np.random.default_rng([tcfg.data_seed, 0])
    dropout_rng = np.random.default_rng([config.seed, 1])
    opt = tcfg.optimizer_state()
    detector = DivergenceDetector(tcfg.divergence_patience)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume, expect=config)
        store, start = ck.store, ck.step
        for name, a in ck.extra_arrays.items():
            kind, _, path = name.partition("/")
            (opt.m if kind == "adam.m" else opt.v)[path] = a
        opt.t = ck.extra["optimizer"]["t"]
        detector.load(ck.extra["detector"])
        _set_rng(data_rng, ck.rng_state["data"])
        _set_rng(dropout_rng, ck.rng_state["dropout"])
    elif store is None:
        store = init_parameters(config)
    store = ParameterStore(store)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    n = len(train_seqs)
    bsz = min(tcfg.batch_size, n)
    non_finite = False
    step = start
    for step in range(start + 1, tcfg.steps + 1):
        pick = data_rng.permutation(n)[:bsz]
        ids, seg, mask = pad_batch([train_seqs[i] for i in pick], length)
        batch = mask_tokens(ids, data_rng, tcfg.mask_rate, vocab_size=config.vocab_size,
                            segment_ids=seg, input_mask=mask)
        loss, _, grads = loss_and_grads(store, config, batch, dropout_rng)
        try:
            lr = adamw_step(store, grads, opt)
        except NonFiniteGradientError as exc:
            log.error("step %d: %s", step, exc)
            detector.update(step, float("nan"))
            detector.flagged_at = detector.flagged_at or step
            non_finite = True
            rows.append(dict(step=step, lr=lr_at(step, opt), train_loss=loss, dev_loss=float("nan"),
                             dev_mlm_acc=float("nan"), diverged=True))
            break
        detector.update(step, loss)
        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            dev_loss, dev_acc = evaluate(store, config, eval_batches)
            rows.append(dict(step=step, lr=lr, train_loss=loss, dev_loss=dev_loss, dev_mlm_acc=dev_acc,
                             diverged=detector.diverged))
            log.info("step %d lr %.3g loss %.4f dev_loss %.4f dev_acc %.4f", step, lr, loss, dev_loss, dev_acc)
        if out is not None and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
            save_training_state(out / f"step-{step}.ckpt", store, config, step, opt, data_rng, dropout_rng,
                                detector, tcfg)
    if out is not None:
        write_metrics(out / "metrics.csv", rows)
        save_training_state(out / "final.ckpt", store, config, step, opt, data_rng, dropout_rng, detector, tcfg)
    return TrainResult(store, rows, step, detector.diverged, non_finite, detector.flagged_at)
