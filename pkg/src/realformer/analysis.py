"""Attention entropy and adjacent-layer Jensen-Shannon statistics per head."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import pad_batch
from .model import DataError, ModelConfig, as_constants, encode
from .tensor import UsageError

LN2 = math.log(2.0)

# (BLUE below, RED above); YELLOW in between, bounds inclusive
THRESHOLDS = {"entropy": (1.5, 4.5), "jsd": (0.25, 0.75)}

RECORD_FIELDS = ("example_id", "token_index", "layer", "head", "value")
SUMMARY_FIELDS = ("layer", "head", "median", "q1", "q3", "color")


@dataclass(frozen=True)
class AnalysisRecord:
    example_id: int
    token_index: int
    layer: int
    head: int
    value: float


@dataclass(frozen=True)
class HeadSummary:
    layer: int
    column: int   # position after sorting heads by median within the layer
    head: int     # original head index
    median: float
    q1: float
    q3: float
    color: str


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise DataError("entropy needs a probability vector")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / m[nz])).sum())


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats (bounded by ln 2)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DataError(f"support mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def color_for(median: float, metric: str) -> str:
    lo, hi = THRESHOLDS[metric]
    if median < lo:
        return "BLUE"
    if median > hi:
        return "RED"
    return "YELLOW"


# --------------------------------------------------------------------------
# collection


def attention_probs(config: ModelConfig, store, examples) -> np.ndarray:
    """Inference-mode probabilities, shape (L, B, heads, seq, seq)."""
    ids, seg, mask = examples
    out = encode(as_constants(store), config, ids, seg, mask)
    return out.probs_all


def _restricted(row: np.ndarray, keys: np.ndarray) -> np.ndarray:
    r = row[keys]
    return r / r.sum()


def entropy_records(probs_all: np.ndarray, input_mask, example_ids: Sequence[int] | None = None) -> list[AnalysisRecord]:
    """One record per (real token, layer, head) from stacked probabilities."""
    L, B, A = probs_all.shape[:3]
    input_mask = np.asarray(input_mask)
    example_ids = range(B) if example_ids is None else example_ids
    out = []
    for b, ex in enumerate(example_ids):
        keys = np.flatnonzero(input_mask[b])
        for t in keys:
            for layer in range(L):
                for h in range(A):
                    out.append(AnalysisRecord(ex, int(t), layer, h, entropy(_restricted(probs_all[layer, b, h, t], keys))))
    return out


def jsd_records(probs_all: np.ndarray, input_mask, example_ids: Sequence[int] | None = None) -> list[AnalysisRecord]:
    """JSD between head i at layer l and head i at layer l-1, per real token, l >= 1."""
    L, B, A = probs_all.shape[:3]
    if L < 2:
        raise UsageError("JSD between adjacent layers needs at least two layers")
    input_mask = np.asarray(input_mask)
    example_ids = range(B) if example_ids is None else example_ids
    out = []
    for b, ex in enumerate(example_ids):
        keys = np.flatnonzero(input_mask[b])
        for t in keys:
            for layer in range(1, L):
                for h in range(A):
                    p = _restricted(probs_all[layer, b, h, t], keys)
                    q = _restricted(probs_all[layer - 1, b, h, t], keys)
                    out.append(AnalysisRecord(ex, int(t), layer, h, jsd(p, q)))
    return out


def _batches(examples: Sequence[Sequence[int]], batch_size: int):
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        yield range(start, start + len(chunk)), pad_batch(chunk)


def collect_entropy(config: ModelConfig, store, examples: Sequence[Sequence[int]], batch_size: int = 64):
    """Entropy records for packed, unpadded example sequences (dropout off)."""
    records = []
    for ids, batch in _batches(examples, batch_size):
        records += entropy_records(attention_probs(config, store, batch), batch[2], ids)
    return records


def collect_jsd(config: ModelConfig, store, examples: Sequence[Sequence[int]], batch_size: int = 64):
    if config.num_layers < 2:
        raise UsageError("JSD between adjacent layers needs at least two layers")
    records = []
    for ids, batch in _batches(examples, batch_size):
        records += jsd_records(attention_probs(config, store, batch), batch[2], ids)
    return records


def summarize(records: Iterable[AnalysisRecord], metric: str) -> list[HeadSummary]:
    """Per-head median and quartiles, heads sorted by median within each layer."""
    if metric not in THRESHOLDS:
        raise ValueError(f"unknown metric {metric!r}")
    groups: dict[tuple[int, int], list[float]] = {}
    for r in records:
        groups.setdefault((r.layer, r.head), []).append(r.value)
    out = []
    for layer in sorted({k[0] for k in groups}):
        stats = []
        for head in sorted(h for (l, h) in groups if l == layer):
            q1, med, q3 = np.percentile(groups[layer, head], [25, 50, 75])
            stats.append((head, float(med), float(q1), float(q3)))
        stats.sort(key=lambda s: s[1])  # stable: ties keep head order
        for col, (head, med, q1, q3) in enumerate(stats):
            out.append(HeadSummary(layer, col, head, med, q1, q3, color_for(med, metric)))
    return out


# --------------------------------------------------------------------------
# export


def export_records(records: Sequence[AnalysisRecord], path) -> None:
    rows = sorted(records, key=lambda r: (r.example_id, r.token_index, r.layer, r.head))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in rows:
            w.writerow((r.example_id, r.token_index, r.layer, r.head, repr(r.value)))


def read_records(path) -> list[AnalysisRecord]:
    with open(path, newline="") as f:
        return [
            AnalysisRecord(int(r["example_id"]), int(r["token_index"]), int(r["layer"]), int(r["head"]), float(r["value"]))
            for r in csv.DictReader(f)
        ]


def export_summaries(summaries: Sequence[HeadSummary], path) -> None:
    rows = sorted(summaries, key=lambda s: (s.layer, s.column))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for s in rows:
            w.writerow((s.layer, s.head, repr(s.median), repr(s.q1), repr(s.q3), s.color))


def write_sidecar(path, *, checkpoint=None, example_count: int, metrics: Sequence[str], seq_len: int | None = None) -> dict:
    digest = None
    if checkpoint is not None:
        digest = hashlib.sha256(Path(checkpoint).read_bytes()).hexdigest()
    meta = {
        "checkpoint_sha256": digest,
        "example_count": example_count,
        "units": "nats",
        "thresholds": {m: {"blue_below": THRESHOLDS[m][0], "red_above": THRESHOLDS[m][1]} for m in metrics},
        "note": (
            "Color thresholds are fixed absolute values tuned for 512-token inputs; "
            "they are not rescaled for shorter sequences."
        ),
    }
    if seq_len is not None:
        meta["max_seq_len"] = seq_len
        meta["max_entropy"] = math.log(seq_len)
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
