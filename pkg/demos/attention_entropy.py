"""
Attention entropy before and after training
===========================================

Entropy of each query's attention distribution, summarized per head and
bucketed with fixed thresholds (BLUE < 1.5 nats, RED > 4.5 nats).
At desk scale sequences are short, so ln(seq) is the ceiling and most
heads start YELLOW or BLUE.
"""

import numpy as np

from realformer import TrainConfig, collect_entropy, init_parameters, preset, summarize, synth_corpus, train
from realformer.analysis import collect_jsd

corpus = synth_corpus("bigram", 64, seed=0, vocab_size=64, seq_len=14, dev_fraction=0.0)
config = preset("desk", dropout_rate=0.0)
examples = corpus.split("train")

before = collect_entropy(config, init_parameters(config), examples)
result = train(config, corpus, TrainConfig(steps=600, batch_size=64, peak_lr=2e-3, warmup_steps=100,
                                           eval_every=200, eval_split="train"))
after = collect_entropy(config, result.store, examples)
print("held-in accuracy", round(result.metrics[-1]["dev_mlm_acc"], 3))

for name, recs in (("init", before), ("trained", after)):
    per_layer = [np.mean([r.value for r in recs if r.layer == l]) for l in range(config.num_layers)]
    print(f"{name:>8} mean entropy per layer", np.round(per_layer, 3), " ceiling", round(np.log(16), 3))

# per-head medians of the top layer, sorted, with colors
for s in summarize(after, "entropy"):
    if s.layer == config.num_layers - 1:
        print(f"layer {s.layer} head {s.head}: median {s.median:.3f} [{s.q1:.3f}, {s.q3:.3f}] {s.color}")

# vertically adjacent heads: JSD in nats, never above ln 2
js = collect_jsd(config, result.store, examples)
print("max JSD", round(max(r.value for r in js), 4), "<= ln 2 =", round(np.log(2), 4))
