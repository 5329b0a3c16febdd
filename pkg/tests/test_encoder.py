import numpy as np
import pytest

from realformer import tensor as T
from realformer.attention import attention_bias, combine_scores
from realformer.encoder import (LayerParams, ResidualMode, encoder_forward, ffn, post_ln_layer, pre_ln_layer,
                                realformer_layer, resolve_residual_mode)
from realformer.model import as_constants, init_parameters, layer_params, preset
from realformer.tensor import ConfigError, DimensionError, Tape, Tensor, UsageError

from helpers import layer_arrays, np_gelu, np_layer_norm, np_multi_head, np_post_ln_layer


def _random_store(L=2, variant="realformer", seed=0, scale=1.0, **kw):
    cfg = preset("tiny", num_layers=L, variant=variant, dropout_rate=0.0, seed=seed, **kw)
    store = init_parameters(cfg)
    rng = np.random.default_rng(seed + 100)
    for k, v in store.items():
        if k.endswith(("gamma", "beta", "bias")):
            store[k] = v + 0.1 * rng.standard_normal(v.shape)
        else:
            store[k] = rng.standard_normal(v.shape) * 0.3 * scale
    return cfg, store


def _zero_store(cfg):
    store = init_parameters(cfg)
    for k in store:
        if not k.endswith("gamma"):
            store[k] = np.zeros_like(store[k])
    return store


def test_ffn_examples(rng):
    cfg = preset("tiny")
    store = _zero_store(cfg)
    c = rng.standard_normal(16)
    store["layer.0.ffn.out.bias"] = c
    lp = layer_params(as_constants(store), cfg)[0]
    out = ffn(Tensor(rng.standard_normal((5, 16))), lp)
    np.testing.assert_array_equal(out.data, np.tile(c, (5, 1)))


def test_ffn_position_wise_and_compositional(rng):
    cfg, store = _random_store()
    lp = layer_params(as_constants(store), cfg)[0]
    x = rng.standard_normal((6, 16))
    perm = rng.permutation(6)
    out = ffn(Tensor(x), lp).data
    np.testing.assert_array_equal(ffn(Tensor(x[perm]), lp).data, out[perm])
    a = layer_arrays(store, 0)
    ref = np_gelu(x @ a["ffn.in.weight"] + a["ffn.in.bias"]) @ a["ffn.out.weight"] + a["ffn.out.bias"]
    np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)
    bad = Tensor(np.ones((3, 8)))
    with pytest.raises(DimensionError):
        ffn(bad, lp)


def test_post_ln_zero_params_gives_zeros(rng):
    cfg = preset("tiny")
    lp = layer_params(as_constants(_zero_store(cfg)), cfg)[0]
    out = post_ln_layer(Tensor(np.zeros((4, 16))), lp)
    np.testing.assert_array_equal(out.hidden.data, 0.0)


def test_post_ln_matches_hand_composition(rng):
    cfg, store = _random_store(variant="post_ln")
    lp = layer_params(as_constants(store), cfg)[0]
    x = rng.standard_normal((4, 16))
    out = post_ln_layer(Tensor(x), lp)
    ref, *_ = np_post_ln_layer(x, layer_arrays(store, 0), 2)
    np.testing.assert_allclose(out.hidden.data, ref, atol=1e-12, rtol=0)


def test_post_ln_equals_realformer_with_zero_prev(rng):
    cfg, store = _random_store()
    lp = layer_params(as_constants(store), cfg)[1]
    x = Tensor(rng.standard_normal((2, 4, 16)))
    a = post_ln_layer(x, lp)
    b = realformer_layer(x, Tensor(np.zeros((2, 2, 4, 4))), lp, layer_index=2)
    assert a.hidden.data.tobytes() == b.hidden.data.tobytes()


def test_pre_ln_zero_weights_identity(rng):
    cfg = preset("tiny", variant="pre_ln", num_layers=8)
    store = _zero_store(cfg)
    x = rng.standard_normal((4, 16))
    lps = layer_params(as_constants(store), cfg)
    np.testing.assert_array_equal(pre_ln_layer(Tensor(x), lps[0]).hidden.data, x)
    h = Tensor(x)
    for lp in lps:
        h = pre_ln_layer(h, lp).hidden
    np.testing.assert_array_equal(h.data, x)
    # encoder_forward is the identity up to the final LN
    fl = (Tensor(np.ones(16)), Tensor(np.zeros(16)))
    out = encoder_forward(Tensor(x), cfg, lps, final_ln=fl)
    np.testing.assert_allclose(out.hidden.data, np_layer_norm(x, 1.0, 0.0), atol=1e-12, rtol=0)


def test_pre_ln_matches_hand_composition(rng):
    cfg, store = _random_store(variant="pre_ln")
    for k in store:
        if k.endswith("gamma"):
            store[k] = np.ones_like(store[k])
        elif k.endswith("beta"):
            store[k] = np.zeros_like(store[k])
    lp = layer_params(as_constants(store), cfg)[0]
    a = layer_arrays(store, 0)
    x = rng.standard_normal((4, 16))
    n = np_layer_norm(x, 1.0, 0.0)
    att, *_ = np_multi_head(n, a["attention.query.weight"], a["attention.key.weight"],
                            a["attention.value.weight"], a["attention.output.weight"], 2)
    y = x + att
    n = np_layer_norm(y, 1.0, 0.0)
    ref = y + np_gelu(n @ a["ffn.in.weight"] + a["ffn.in.bias"]) @ a["ffn.out.weight"] + a["ffn.out.bias"]
    np.testing.assert_allclose(pre_ln_layer(Tensor(x), lp).hidden.data, ref, atol=1e-12, rtol=0)


def test_realformer_layer_one_modes_agree(rng):
    cfg, store = _random_store()
    lp = layer_params(as_constants(store), cfg)[0]
    x = Tensor(rng.standard_normal((4, 16)))
    a = realformer_layer(x, None, lp, mode="sum")
    b = realformer_layer(x, None, lp, mode="running_mean")
    assert a.hidden.data.tobytes() == b.hidden.data.tobytes()
    assert a.scores.data.tobytes() == b.scores.data.tobytes()


def test_realformer_layer_errors(rng):
    cfg, store = _random_store()
    lp = layer_params(as_constants(store), cfg)[0]
    x = Tensor(rng.standard_normal((4, 16)))
    prev = Tensor(np.zeros((2, 4, 4)))
    with pytest.raises(UsageError):
        realformer_layer(x, prev, lp, layer_index=1)
    with pytest.raises(UsageError):
        realformer_layer(x, None, lp, layer_index=2)
    with pytest.raises(ConfigError):
        realformer_layer(x, prev, lp, mode="none", layer_index=2)
    with pytest.raises(DimensionError):
        post_ln_layer(Tensor(np.ones((4, 8))), lp)


def test_zero_prev_stack_equals_post_ln_stack(rng):
    cfg, store = _random_store(L=3)
    lps = layer_params(as_constants(store), cfg)
    x = Tensor(rng.standard_normal((4, 16)))
    a = b = x
    for i, lp in enumerate(lps, start=1):
        a = post_ln_layer(a, lp).hidden
        b = realformer_layer(b, None if i == 1 else Tensor(np.zeros((2, 4, 4))), lp, layer_index=i).hidden
    assert a.data.tobytes() == b.data.tobytes()


def _naive_stack(store, x, L, mode, bias=None):
    """Independent full-stack pass; returns per-layer raw and logits."""
    raws, logits_all = [], []
    prev = None
    for i in range(L):
        x, raw, logits, _ = np_post_ln_layer(x, layer_arrays(store, i), 2, prev, bias, mode, i + 1)
        raws.append(raw)
        logits_all.append(logits)
        prev = logits
    return x, raws, logits_all


@pytest.mark.parametrize("mode", ["sum", "running_mean"])
def test_score_propagation_against_naive_pass(rng, mode):
    L = 4
    cfg, store = _random_store(L=L, residual_mode=mode)
    xs = rng.standard_normal((5, 16))
    mask = np.array([1, 1, 1, 1, 0])
    out = encoder_forward(Tensor(xs), cfg, layer_params(as_constants(store), cfg), attention_bias(mask))
    hidden, raws, _ = _naive_stack(store, xs, L, mode, attention_bias(mask)[0])
    for k in range(1, L + 1):
        want = sum(raws[:k]) if mode == "sum" else sum(raws[:k]) / k
        np.testing.assert_allclose(out.scores[k - 1].data, want, atol=1e-12, rtol=0)
    np.testing.assert_allclose(out.hidden.data, hidden, atol=1e-12, rtol=0)


def test_running_mean_smaller_than_sum_when_raws_share_sign():
    raws = [np.full((1, 2, 2), v) for v in (1.0, 2.0, 0.5)]
    s = m = None
    for k, r in enumerate(raws, start=1):
        s = combine_scores(Tensor(r), s, "sum", k)
        m = combine_scores(Tensor(r), m, "running_mean", k)
    assert np.all(np.abs(m.data) < np.abs(s.data))


def test_single_layer_encoder_matches_layer_op(rng):
    for variant in ("post_ln", "pre_ln", "realformer"):
        cfg, store = _random_store(L=1, variant=variant)
        lp = layer_params(as_constants(store), cfg)
        x = Tensor(rng.standard_normal((4, 16)))
        if variant == "pre_ln":
            fl = (Tensor(store["final_ln.gamma"]), Tensor(store["final_ln.beta"]))
            ref = T.layer_norm(pre_ln_layer(x, lp[0]).hidden, *fl)
            out = encoder_forward(x, cfg, lp, final_ln=fl)
        else:
            op = post_ln_layer if variant == "post_ln" else (lambda x, p: realformer_layer(x, None, p))
            ref = op(x, lp[0]).hidden
            out = encoder_forward(x, cfg, lp)
        assert out.hidden.data.tobytes() == ref.data.tobytes()


def test_encoder_errors(rng):
    cfg, store = _random_store(L=2)
    lps = layer_params(as_constants(store), cfg)
    x = Tensor(rng.standard_normal((4, 16)))
    with pytest.raises(ConfigError):
        encoder_forward(x, cfg, lps[:1])
    cfg2, store2 = _random_store(L=2, variant="pre_ln")
    with pytest.raises(UsageError):
        encoder_forward(x, cfg2, layer_params(as_constants(store2), cfg2))


def test_residual_edge_off_matches_post_ln(rng):
    cfg, store = _random_store(L=3)
    lps = layer_params(as_constants(store), cfg)
    x = Tensor(rng.standard_normal((2, 4, 16)))
    a = encoder_forward(x, cfg, lps, residual_edge=False)
    b = encoder_forward(x, cfg.replace(variant="post_ln"), lps)
    assert a.hidden.data.tobytes() == b.hidden.data.tobytes()
    assert a.probs_all.shape == (3, 2, 2, 4, 4)


@pytest.mark.parametrize("variant,expect_zero", [("realformer", False), ("post_ln", True)])
def test_score_stream_carries_gradient(rng, variant, expect_zero):
    L = 3
    cfg, store = _random_store(L=L, variant=variant)
    for i in range(L - 1):
        store[f"layer.{i}.attention.value.weight"][:] = 0.0
    tape = Tape()
    params = tape.parameters(store)
    out = encoder_forward(Tensor(rng.standard_normal((4, 16))), cfg, layer_params(params, cfg))
    loss = T.sum(T.mul(out.hidden, Tensor(rng.standard_normal((4, 16)))))
    g = T.backward(tape, loss)["layer.0.attention.query.weight"]
    if expect_zero:
        assert np.abs(g).max() == 0.0
    else:
        assert np.abs(g).max() > 1e-6


def test_resolve_residual_mode():
    assert resolve_residual_mode("auto", 24) is ResidualMode.SUM
    assert resolve_residual_mode("auto", 25) is ResidualMode.RUNNING_MEAN
    assert resolve_residual_mode("sum", 36) is ResidualMode.SUM
