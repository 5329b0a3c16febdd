"""Central finite-difference checks of tape gradients on full MLM losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .corpus import pad_batch, synth_corpus
from .model import ModelConfig, init_parameters
from .training import TrainingBatch, batch_loss, loss_and_grads, mask_tokens

STEP = 1e-5
# Central differences at STEP resolve gradients to ~eps*|loss|/STEP ~ 1e-10.
# Relative errors use max(|a|, |n|, FLOOR) so entries smaller than FLOOR are
# held to an absolute 1e-4 * FLOOR = 1e-10 instead of a meaningless ratio.
FLOOR = 1e-6


@dataclass
class GradReport:
    max_rel_err: float
    worst_path: str
    worst_index: tuple
    checked: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def rel_err(a, b, floor: float = FLOOR) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, step: float = STEP, indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``array`` entries (mutated in place, then restored)."""
    g = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return g


def check_store(store: Mapping[str, np.ndarray], config: ModelConfig, batch: TrainingBatch,
                step: float = STEP, max_per_param: int | None = None, seed: int = 0) -> GradReport:
    """Compare tape gradients with central differences for every parameter."""
    _, _, grads = loss_and_grads(store, config, batch)
    f = lambda: batch_loss(store, config, batch)[0]  # noqa: E731
    rng = np.random.default_rng(seed)
    worst = (-1.0, "", ())
    checked = 0
    for path, array in store.items():
        n = array.size
        idx = None
        if max_per_param is not None and n > max_per_param:
            idx = np.sort(rng.choice(n, size=max_per_param, replace=False))
        num = numeric_gradient(f, array, step, idx)
        sel = np.arange(n) if idx is None else idx
        err = rel_err(grads[path].reshape(-1)[sel], num.reshape(-1)[sel])
        checked += len(sel)
        k = int(np.argmax(err))
        if err[k] > worst[0]:
            worst = (float(err[k]), path, np.unravel_index(sel[k], array.shape))
    return GradReport(worst[0], worst[1], tuple(int(i) for i in worst[2]), checked)


def gradcheck_config(config: ModelConfig, *, batch_size: int = 2, seq_len: int | None = None, seed: int = 0,
                     max_per_param: int | None = None, weight_scale: float = 10.0) -> GradReport:
    """Build a small copy-corpus batch for ``config`` and check every parameter, dropout off."""
    config = config.replace(dropout_rate=0.0)
    half = max(1, ((seq_len or config.max_seq_len) - 3) // 2)
    corpus = synth_corpus("copy", batch_size, seed, config.vocab_size, seq_len=half, dev_fraction=0.0)
    ids, seg, mask = pad_batch(corpus.sequences)
    # pad one row to exercise the attention mask
    if batch_size > 1:
        ids[-1, -2:] = 0
        mask[-1, -2:] = 0
        seg[-1, -2:] = 0
    batch = mask_tokens(ids, np.random.default_rng(seed), 0.3, vocab_size=config.vocab_size,
                        segment_ids=seg, input_mask=mask)
    store = init_parameters(config)
    # larger weights give peaked attention and O(1e-3+) gradients; LayerNorm
    # and bias terms move off their trivial init so every path is exercised
    rng = np.random.default_rng(seed + 1)
    for k, v in store.items():
        if k.endswith(("gamma", "beta", "bias")):
            store[k] = v + 0.1 * rng.standard_normal(v.shape)
        else:
            store[k] = v * weight_scale
    return check_store(store, config, batch, max_per_param=max_per_param, seed=seed)
