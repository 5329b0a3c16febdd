"""
Residual attention scores, layer by layer
=========================================

A RealFormer layer adds the previous layer's pre-softmax scores to its own.
This script runs a small random encoder and shows the stream growing
(sum mode) or staying bounded (running-mean mode).
"""

import numpy as np

from realformer import encode, init_parameters, preset
from realformer.model import as_constants

ids = np.array([[2, 11, 17, 23, 3, 11, 17, 23, 3]])

# --- the same weights, two ways of combining scores ---
for mode in ("sum", "running_mean"):
    config = preset("desk", num_layers=6, residual_mode=mode, dropout_rate=0.0)
    params = {k: v * 3 for k, v in init_parameters(config).items()}  # larger weights, visible scores
    out = encode(as_constants(params), config, ids)
    scale = [float(np.abs(s.data).mean()) for s in out.scores]
    print(f"{mode:>12}: mean |scores| per layer", np.round(scale, 3))

# --- what the last layer attends to ---
probs = out.probs_all[-1, 0]            # (heads, seq, seq)
print("head 0, query 1 ->", np.round(probs[0, 1], 3))
print("row sums", probs.sum(axis=-1).round(12).min())
