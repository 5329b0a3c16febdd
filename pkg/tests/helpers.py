"""Independent numpy re-implementations used as oracles in tests."""
import math

import numpy as np
from scipy.special import erf


def np_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def np_layer_norm(x, g, b, eps=1e-12):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def naive_attention(q, k, v, prev=None, bias=None):
    """Single head, explicit loops; q, k: (n, d), v: (n, dv)."""
    n, m, d = q.shape[0], k.shape[0], q.shape[1]
    logits = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(d):
                s += q[i, t] * k[j, t]
            logits[i, j] = s / math.sqrt(d)
    raw = logits.copy()
    if prev is not None:
        logits = logits + prev
    masked = logits if bias is None else logits + bias
    probs = np.zeros((n, m))
    ctx = np.zeros((n, v.shape[1]))
    for i in range(n):
        row = np.exp(masked[i] - masked[i].max())
        probs[i] = row / row.sum()
        for j in range(m):
            ctx[i] += probs[i, j] * v[j]
    return ctx, raw, logits, probs


def np_multi_head(x, wq, wk, wv, wo, h, prev=None, bias=None, mode="sum", k=1):
    """Multi-head self attention on (seq, H); returns (out, raw, logits, probs)."""
    d = wq.shape[1] // h
    ctxs, raws, logits_all, probs_all = [], [], [], []
    for i in range(h):
        sl = slice(i * d, (i + 1) * d)
        q, kk, v = x @ wq[:, sl], x @ wk[:, sl], x @ wv[:, sl]
        raw = q @ kk.T / math.sqrt(d)
        logits = raw
        if prev is not None:
            logits = raw + prev[i] if mode == "sum" else ((k - 1) * prev[i] + raw) / k
        z = logits if bias is None else logits + bias
        p = np_softmax(z)
        ctxs.append(p @ v)
        raws.append(raw)
        logits_all.append(logits)
        probs_all.append(p)
    out = np.concatenate(ctxs, axis=-1) @ wo
    return out, np.stack(raws), np.stack(logits_all), np.stack(probs_all)


def layer_arrays(store, i):
    p = f"layer.{i}."
    return {k[len(p):]: v for k, v in store.items() if k.startswith(p)}


def np_post_ln_layer(x, a, h, prev=None, bias=None, mode="sum", k=1, act=np_gelu):
    att, raw, logits, probs = np_multi_head(
        x, a["attention.query.weight"], a["attention.key.weight"], a["attention.value.weight"],
        a["attention.output.weight"], h, prev, bias, mode, k)
    y = np_layer_norm(x + att, a["attention.ln.gamma"], a["attention.ln.beta"])
    f = act(y @ a["ffn.in.weight"] + a["ffn.in.bias"]) @ a["ffn.out.weight"] + a["ffn.out.bias"]
    return np_layer_norm(y + f, a["ffn.ln.gamma"], a["ffn.ln.beta"]), raw, logits, probs
