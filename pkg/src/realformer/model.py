"""BERT-style encoder assembly: configuration, parameters, embeddings and MLM head."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .attention import ResidualMode, attention_bias
from .encoder import EncoderOutput, LayerParams, Variant, encoder_forward, resolve_residual_mode
from .tensor import ConfigError, Tensor

INIT_STD = 0.02


class DataError(ValueError):
    """Input data violates a model contract (ids out of range, bad lengths, ...)."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    intermediate_size: int
    variant: str = "realformer"
    residual_mode: str = "auto"
    vocab_size: int = 30522
    max_seq_len: int = 512
    dropout_rate: float = 0.1
    activation: str = "gelu"
    seed: int = 0
    type_vocab_size: int = 2
    layer_norm_eps: float = 1e-12
    residual_includes_mask: bool = False
    # reserved: NSP is not implemented, segment ids are still produced
    next_sentence: bool = False

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "num_heads", "intermediate_size", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden size {self.hidden_size} is not divisible by {self.num_heads} heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        try:
            Variant(self.variant)
            if self.residual_mode != "auto":
                ResidualMode(self.residual_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.variant == "realformer" and self.residual_mode == "none":
            raise ConfigError("realformer needs residual mode sum, running_mean or auto")
        if self.next_sentence:
            raise ConfigError("next-sentence prediction is not supported")

    @property
    def effective_residual_mode(self) -> ResidualMode:
        if self.variant != "realformer":
            return ResidualMode.NONE
        return resolve_residual_mode(self.residual_mode, self.num_layers)

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# L / H / A / I; tiny and desk are test-scale additions
PRESETS: dict[str, dict] = {
    "small": dict(num_layers=4, hidden_size=512, num_heads=8, intermediate_size=2048),
    "base": dict(num_layers=12, hidden_size=768, num_heads=12, intermediate_size=3072),
    "large": dict(num_layers=24, hidden_size=1024, num_heads=16, intermediate_size=4096),
    "xlarge": dict(num_layers=36, hidden_size=1536, num_heads=24, intermediate_size=6144),
    "tiny": dict(num_layers=2, hidden_size=16, num_heads=2, intermediate_size=32, vocab_size=32, max_seq_len=16),
    "desk": dict(num_layers=4, hidden_size=64, num_heads=4, intermediate_size=256, vocab_size=64, max_seq_len=32),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(**{**base, **overrides})


class ParameterStore(dict):
    """Ordered map from parameter path to float64 array."""

    @property
    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.values()))

    def copy(self) -> "ParameterStore":
        return ParameterStore((k, v.copy()) for k, v in self.items())

    def equal(self, other: Mapping[str, np.ndarray]) -> bool:
        """Bitwise equality of paths, order, shapes and values."""
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, I, V = config.hidden_size, config.intermediate_size, config.vocab_size
    shapes = {
        "embeddings.token": (V, H),
        "embeddings.position": (config.max_seq_len, H),
        "embeddings.segment": (config.type_vocab_size, H),
        "embeddings.ln.gamma": (H,),
        "embeddings.ln.beta": (H,),
    }
    for i in range(config.num_layers):
        p = f"layer.{i}"
        for proj in ("query", "key", "value", "output"):
            shapes[f"{p}.attention.{proj}.weight"] = (H, H)
        shapes[f"{p}.attention.ln.gamma"] = (H,)
        shapes[f"{p}.attention.ln.beta"] = (H,)
        shapes[f"{p}.ffn.in.weight"] = (H, I)
        shapes[f"{p}.ffn.in.bias"] = (I,)
        shapes[f"{p}.ffn.out.weight"] = (I, H)
        shapes[f"{p}.ffn.out.bias"] = (H,)
        shapes[f"{p}.ffn.ln.gamma"] = (H,)
        shapes[f"{p}.ffn.ln.beta"] = (H,)
    if config.variant == "pre_ln":
        shapes["final_ln.gamma"] = (H,)
        shapes["final_ln.beta"] = (H,)
    shapes["mlm.transform.weight"] = (H, H)
    shapes["mlm.transform.bias"] = (H,)
    shapes["mlm.ln.gamma"] = (H,)
    shapes["mlm.ln.beta"] = (H,)
    shapes["mlm.output_bias"] = (V,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(config).values())


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within ``bound`` std."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std


def is_no_decay(path: str) -> bool:
    """LayerNorm parameters and biases are exempt from weight decay."""
    leaf = path.rsplit(".", 1)[-1]
    return leaf in ("gamma", "beta", "bias", "output_bias")


def init_parameters(config: ModelConfig) -> ParameterStore:
    rng = np.random.default_rng(config.seed)
    residual_scale = 1.0 / math.sqrt(2 * config.num_layers)
    store = ParameterStore()
    for path, shape in parameter_shapes(config).items():
        leaf = path.rsplit(".", 1)[-1]
        if leaf == "gamma":
            value = np.ones(shape)
        elif leaf in ("beta", "bias", "output_bias"):
            value = np.zeros(shape)
        else:
            value = truncated_normal(rng, shape)
            if config.variant == "pre_ln" and path.endswith(("attention.output.weight", "ffn.out.weight")):
                value *= residual_scale
        store[path] = value
    return store


# --------------------------------------------------------------------------
# forward pieces; ``params`` maps paths to Tensors (tape leaves or constants)


def as_constants(store: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in store.items()}


def embed(params, config: ModelConfig, token_ids, segment_ids=None, rng=None) -> Tensor:
    """Token + position + segment embeddings, LayerNorm, dropout."""
    ids = np.asarray(token_ids, dtype=np.int64)
    seq = ids.shape[-1]
    if seq > config.max_seq_len:
        raise DataError(f"sequence length {seq} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise DataError(f"token id out of range [0, {config.vocab_size})")
    seg = np.zeros_like(ids) if segment_ids is None else np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != ids.shape:
        raise DataError(f"segment ids {seg.shape} do not match token ids {ids.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= config.type_vocab_size):
        raise DataError(f"segment id out of range [0, {config.type_vocab_size})")
    x = T.index(params["embeddings.token"], ids)
    x = T.add(x, T.index(params["embeddings.position"], slice(0, seq)))
    x = T.add(x, T.index(params["embeddings.segment"], seg))
    x = T.layer_norm(x, params["embeddings.ln.gamma"], params["embeddings.ln.beta"], config.layer_norm_eps)
    return T.dropout(x, config.dropout_rate, rng)


def layer_params(params, config: ModelConfig) -> list[LayerParams]:
    return [LayerParams.from_params(params, f"layer.{i}", config.num_heads) for i in range(config.num_layers)]


def encode(params, config: ModelConfig, token_ids, segment_ids=None, input_mask=None, rng=None,
           *, residual_edge: bool = True) -> EncoderOutput:
    """Embeddings followed by the encoder stack; ``rng=None`` is inference mode."""
    ids = np.asarray(token_ids)
    if input_mask is None:
        input_mask = np.ones(ids.shape)
    x = embed(params, config, ids, segment_ids, rng)
    final_ln = None
    if config.variant == "pre_ln":
        final_ln = (params["final_ln.gamma"], params["final_ln.beta"])
    return encoder_forward(
        x, config, layer_params(params, config), attention_bias(input_mask), rng,
        final_ln=final_ln, residual_edge=residual_edge,
    )


def mlm_logits(params, config: ModelConfig, hidden: Tensor, positions) -> Tensor:
    """Vocabulary logits at ``positions``.

    ``positions`` indexes the leading axes of ``hidden``: a 1-d sequence of
    row indices for (seq, H) input, or a (batch_idx, pos_idx) pair for
    (B, seq, H) input.  The decoder reuses the token embedding matrix.
    """
    key = tuple(np.asarray(p, dtype=np.int64) for p in positions) if hidden.ndim == 3 else np.asarray(positions, dtype=np.int64)
    lead = hidden.shape[:-1]
    for axis, k in enumerate(key if isinstance(key, tuple) else (key,)):
        if k.size and (k.min() < 0 or k.max() >= lead[axis]):
            raise DataError(f"position index out of range for hidden shape {hidden.shape}")
    h = T.index(hidden, key)
    act = T.ACTIVATIONS[config.activation]
    h = act(T.add(T.matmul(h, params["mlm.transform.weight"]), params["mlm.transform.bias"]))
    h = T.layer_norm(h, params["mlm.ln.gamma"], params["mlm.ln.beta"], config.layer_norm_eps)
    logits = T.matmul(h, T.swapaxes(params["embeddings.token"], 0, 1))
    return T.add(logits, params["mlm.output_bias"])
