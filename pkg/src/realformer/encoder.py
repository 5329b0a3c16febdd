"""Post-LN, Pre-LN and RealFormer layers, and the stacked encoder."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionParams, ResidualMode, multi_head
from .tensor import ConfigError, DimensionError, Tensor, UsageError


class Variant(str, Enum):
    POST_LN = "post_ln"
    PRE_LN = "pre_ln"
    REALFORMER = "realformer"


@dataclass
class LayerParams:
    attention: AttentionParams
    attn_ln: tuple[Tensor, Tensor]
    ffn_in: tuple[Tensor, Tensor]    # W_1 (H x I), b_1 (I)
    ffn_out: tuple[Tensor, Tensor]   # W_2 (I x H), b_2 (H)
    ffn_ln: tuple[Tensor, Tensor]

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str, num_heads: int) -> "LayerParams":
        p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
        return cls(
            attention=AttentionParams(
                p("attention.query.weight"),
                p("attention.key.weight"),
                p("attention.value.weight"),
                p("attention.output.weight"),
                num_heads,
            ),
            attn_ln=(p("attention.ln.gamma"), p("attention.ln.beta")),
            ffn_in=(p("ffn.in.weight"), p("ffn.in.bias")),
            ffn_out=(p("ffn.out.weight"), p("ffn.out.bias")),
            ffn_ln=(p("ffn.ln.gamma"), p("ffn.ln.beta")),
        )


class LayerOutput(NamedTuple):
    hidden: Tensor
    scores: Tensor
    probs: Tensor


class EncoderOutput(NamedTuple):
    hidden: Tensor
    probs: list[Tensor]
    scores: list[Tensor]

    @property
    def probs_all(self) -> np.ndarray:
        """Attention probabilities stacked as (L, ..., heads, seq, seq)."""
        return np.stack([p.data for p in self.probs])


def default_residual_mode(num_layers: int) -> ResidualMode:
    """Running sum up to 24 layers, running mean beyond."""
    return ResidualMode.SUM if num_layers <= 24 else ResidualMode.RUNNING_MEAN


def resolve_residual_mode(mode, num_layers: int) -> ResidualMode:
    if mode is None or mode == "auto":
        return default_residual_mode(num_layers)
    return ResidualMode(mode)


def ffn(x: Tensor, params: LayerParams, activation: str = "gelu") -> Tensor:
    (w1, b1), (w2, b2) = params.ffn_in, params.ffn_out
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise DimensionError(f"ffn widths do not line up: x {x.shape}, W_1 {w1.shape}, W_2 {w2.shape}")
    act = T.ACTIVATIONS[activation]
    return T.add(T.matmul(act(T.add(T.matmul(x, w1), b1)), w2), b2)


def _check_input(x: Tensor, params: LayerParams):
    if x.ndim < 2 or x.shape[-1] != params.attention.query.shape[0]:
        raise DimensionError(f"layer input {x.shape} does not match hidden size {params.attention.query.shape[0]}")


def _post_ln(x, params, mask, rng, prev, *, dropout_rate, activation, eps, **attn_kwargs) -> LayerOutput:
    _check_input(x, params)
    att = multi_head(x, x, x, params.attention, mask, prev, dropout_rate=dropout_rate, rng=rng, **attn_kwargs)
    h = T.layer_norm(T.add(x, T.dropout(att.context, dropout_rate, rng)), *params.attn_ln, eps)
    out = T.layer_norm(T.add(h, T.dropout(ffn(h, params, activation), dropout_rate, rng)), *params.ffn_ln, eps)
    return LayerOutput(out, att.scores, att.probs)


def post_ln_layer(x, params, mask=None, rng=None, *, dropout_rate=0.0, activation="gelu", eps=1e-12) -> LayerOutput:
    """LN(x + MHA(x)) followed by LN(h + FFN(h)).  ``rng=None`` means inference."""
    return _post_ln(x, params, mask, rng, None, dropout_rate=dropout_rate, activation=activation, eps=eps)


def pre_ln_layer(x, params, mask=None, rng=None, *, dropout_rate=0.0, activation="gelu", eps=1e-12) -> LayerOutput:
    """x + MHA(LN(x)) followed by x' + FFN(LN(x')); the skip path never sees LN."""
    _check_input(x, params)
    n = T.layer_norm(x, *params.attn_ln, eps)
    att = multi_head(n, n, n, params.attention, mask, None, dropout_rate=dropout_rate, rng=rng)
    x = T.add(x, T.dropout(att.context, dropout_rate, rng))
    n = T.layer_norm(x, *params.ffn_ln, eps)
    x = T.add(x, T.dropout(ffn(n, params, activation), dropout_rate, rng))
    return LayerOutput(x, att.scores, att.probs)


def realformer_layer(
    x,
    prev,
    params,
    mask=None,
    rng=None,
    mode: ResidualMode | str = ResidualMode.SUM,
    layer_index: int = 1,
    *,
    dropout_rate=0.0,
    activation="gelu",
    eps=1e-12,
    include_mask=False,
) -> LayerOutput:
    """Post-LN layer whose attention logits add the previous layer's scores.

    ``layer_index`` is 1-based; ``prev`` must be given exactly when it is > 1.
    ``LayerOutput.scores`` is the stream handed to the next layer.
    """
    if layer_index < 1:
        raise UsageError(f"layer_index is 1-based, got {layer_index}")
    if (prev is None) != (layer_index == 1):
        raise UsageError(
            f"prev scores must be absent exactly at layer 1 (layer_index={layer_index}, prev given={prev is not None})"
        )
    mode = ResidualMode(mode)
    if mode is ResidualMode.NONE:
        raise ConfigError("realformer layers need residual mode 'sum' or 'running_mean'")
    return _post_ln(
        x, params, mask, rng, prev,
        dropout_rate=dropout_rate, activation=activation, eps=eps,
        mode=mode, layer_index=layer_index, include_mask=include_mask,
    )


def encoder_forward(
    x: Tensor,
    config,
    layers: Sequence[LayerParams],
    mask=None,
    rng: np.random.Generator | None = None,
    *,
    final_ln: tuple[Tensor, Tensor] | None = None,
    residual_edge: bool = True,
) -> EncoderOutput:
    """Run the configured stack.

    ``config`` needs ``num_layers``, ``variant``, ``residual_mode``,
    ``dropout_rate``, ``activation`` and ``layer_norm_eps`` (a ModelConfig
    works).  ``final_ln`` is required for Pre-LN.  With ``residual_edge``
    off, RealFormer layers receive all-zero Prev instead of the stream.
    """
    if len(layers) != config.num_layers:
        raise ConfigError(f"config asks for {config.num_layers} layers, got parameters for {len(layers)}")
    variant = Variant(config.variant)
    common = dict(dropout_rate=config.dropout_rate, activation=config.activation, eps=config.layer_norm_eps)
    mode = resolve_residual_mode(getattr(config, "residual_mode", None), config.num_layers)
    probs, scores = [], []
    prev = None
    for i, params in enumerate(layers, start=1):
        if variant is Variant.POST_LN:
            out = post_ln_layer(x, params, mask, rng, **common)
        elif variant is Variant.PRE_LN:
            out = pre_ln_layer(x, params, mask, rng, **common)
        else:
            if i > 1 and not residual_edge:
                prev = Tensor(np.zeros(scores[-1].shape))
            out = realformer_layer(
                x, prev, params, mask, rng, mode, i,
                include_mask=getattr(config, "residual_includes_mask", False), **common,
            )
            prev = out.scores
        x = out.hidden
        probs.append(out.probs)
        scores.append(out.scores)
    if variant is Variant.PRE_LN:
        if final_ln is None:
            raise UsageError("pre_ln encoder needs final_ln parameters")
        x = T.layer_norm(x, *final_ln, config.layer_norm_eps)
    return EncoderOutput(x, probs, scores)
