"""Scaled dot-product attention and multi-head plumbing with residual scores."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import MASK_BIAS, DimensionError, Tensor


class ResidualMode(str, Enum):
    NONE = "none"
    SUM = "sum"
    RUNNING_MEAN = "running_mean"


@dataclass
class AttentionParams:
    """Fused projections: column block ``i`` of ``query`` is W^Q_i, and so on.

    ``query``/``key``/``value`` are (H, h*d) and ``output`` is (h*d, H).
    """

    query: Tensor
    key: Tensor
    value: Tensor
    output: Tensor
    num_heads: int

    def __post_init__(self):
        h = self.num_heads
        width = self.query.shape[1]
        if h < 1 or width % h:
            raise DimensionError(f"projection width {width} not divisible by {h} heads")
        if self.key.shape != self.query.shape:
            raise DimensionError(f"key projection {self.key.shape} != query {self.query.shape}")
        if self.value.shape[1] % h:
            raise DimensionError(f"value width {self.value.shape[1]} not divisible by {h} heads")
        if self.output.shape[0] != self.value.shape[1]:
            raise DimensionError(
                f"output projection expects {self.output.shape[0]} inputs, heads give {self.value.shape[1]}"
            )

    @property
    def head_size(self) -> int:
        return self.query.shape[1] // self.num_heads

    @property
    def value_size(self) -> int:
        return self.value.shape[1] // self.num_heads

    def head(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(W^Q_i, W^K_i, W^V_i) for head ``i`` as plain arrays."""
        dk, dv = self.head_size, self.value_size
        return (
            self.query.data[:, i * dk:(i + 1) * dk],
            self.key.data[:, i * dk:(i + 1) * dk],
            self.value.data[:, i * dv:(i + 1) * dv],
        )


class AttentionOutput(NamedTuple):
    context: Tensor
    raw: Tensor       # Q'K'^T / sqrt(d_k)
    scores: Tensor    # what the next layer receives as Prev (mask-free by default)
    probs: Tensor     # softmax(scores + mask), before attention dropout


def attention_bias(input_mask) -> np.ndarray:
    """Additive key bias from a 0/1 padding mask of shape (..., seq)."""
    m = np.asarray(input_mask)
    return np.where(m[..., None, None, :] > 0, 0.0, MASK_BIAS)


def combine_scores(raw: Tensor, prev: Tensor | None, mode: ResidualMode | str, layer_index: int) -> Tensor:
    """Merge this layer's raw scores with the incoming residual stream.

    ``running_mean`` keeps the cumulative mean of the raw scores of layers
    1..layer_index; ``sum`` keeps their running sum.
    """
    mode = ResidualMode(mode)
    if prev is None or mode is ResidualMode.NONE:
        return raw
    if prev.shape != raw.shape:
        raise DimensionError(f"prev scores {prev.shape} do not match attention scores {raw.shape}")
    if mode is ResidualMode.SUM:
        return T.add(raw, prev)
    k = layer_index
    return T.scale(T.add(T.scale(prev, k - 1), raw), 1.0 / k)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask=None,
    prev: Tensor | None = None,
    *,
    mode: ResidualMode | str = ResidualMode.SUM,
    layer_index: int = 1,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    include_mask: bool = False,
) -> AttentionOutput:
    """softmax(QK^T/sqrt(d_k) (+) prev + mask) V on (..., seq, d) blocks."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape} != key width {k.shape}")
    raw = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if prev is not None and prev.shape[-2:] != raw.shape[-2:]:
        raise DimensionError(f"prev scores {prev.shape} do not match (from_len, to_len) {raw.shape[-2:]}")
    logits = combine_scores(raw, prev, mode, layer_index)
    probs = T.softmax_rows(logits, mask)
    context = T.matmul(T.dropout(probs, dropout_rate, rng), v)
    scores = logits
    if include_mask and mask is not None:
        scores = T.add(logits, np.broadcast_to(mask, logits.shape))
    return AttentionOutput(context, raw, scores, probs)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, width = x.shape
    return T.swapaxes(T.reshape(x, (*lead, h, width // h)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = T.swapaxes(x, -3, -2)
    *lead, h, d = x.shape
    return T.reshape(x, (*lead, h * d))


def multi_head(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    params: AttentionParams,
    mask=None,
    prev: Tensor | None = None,
    **kwargs,
) -> AttentionOutput:
    """Multi-head attention over (..., seq, H) inputs.

    ``prev`` has shape (..., heads, from_len, to_len); head ``i`` sees slice
    ``prev[..., i, :, :]``.  The returned ``context`` is already projected by
    W^O; ``raw``, ``scores`` and ``probs`` keep the head axis.
    """
    h = params.num_heads
    if prev is not None and (prev.ndim < 3 or prev.shape[-3] != h):
        raise DimensionError(f"prev scores {prev.shape} carry the wrong head count (expected {h})")
    q = _split_heads(T.matmul(q_in, params.query), h)
    k = _split_heads(T.matmul(k_in, params.key), h)
    v = _split_heads(T.matmul(v_in, params.value), h)
    out = scaled_dot_attention(q, k, v, mask, prev, **kwargs)
    projected = T.matmul(_merge_heads(out.context), params.output)
    return out._replace(context=projected)
