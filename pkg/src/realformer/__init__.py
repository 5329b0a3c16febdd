"""Residual-attention transformer encoders (RealFormer, Post-LN, Pre-LN) in numpy."""
from .analysis import collect_entropy, collect_jsd, entropy, jsd, summarize
from .attention import AttentionParams, ResidualMode, multi_head, scaled_dot_attention
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Vocab, build_vocab, synth_corpus, text_corpus
from .encoder import Variant, encoder_forward, post_ln_layer, pre_ln_layer, realformer_layer
from .model import ModelConfig, ParameterStore, encode, init_parameters, mlm_logits, preset
from .tensor import ConfigError, DimensionError, Tape, Tensor, UsageError, backward
from .training import TrainConfig, adamw_step, lr_at, mask_tokens, mlm_loss, train

__all__ = [
    "AttentionParams", "ConfigError", "DimensionError", "ModelConfig", "ParameterStore", "ResidualMode", "Tape",
    "Tensor", "TrainConfig", "UsageError", "Variant", "Vocab", "adamw_step", "backward", "build_vocab",
    "collect_entropy", "collect_jsd", "encode", "encoder_forward", "entropy", "init_parameters", "jsd",
    "load_checkpoint", "lr_at", "mask_tokens", "mlm_logits", "mlm_loss", "multi_head", "post_ln_layer",
    "pre_ln_layer", "preset", "realformer_layer", "save_checkpoint", "scaled_dot_attention", "summarize",
    "synth_corpus", "text_corpus", "train",
]
