import math

import numpy as np
import pytest
from scipy.stats import truncnorm

from realformer import tensor as T
from realformer.checkpoint import (BadMagicError, ChecksumError, ShapeMismatchError, TruncatedCheckpointError,
                                   VersionMismatchError, load_checkpoint, save_checkpoint)
from realformer.model import (DataError, ModelConfig, ParameterStore, as_constants, count_parameters, embed,
                              encode, init_parameters, is_no_decay, mlm_logits, parameter_shapes, preset)
from realformer.tensor import ConfigError, Tape, Tensor
from realformer.training import mlm_loss

from conftest import fd_check


@pytest.mark.parametrize("name,dims", [
    ("small", (4, 512, 8, 2048)),
    ("base", (12, 768, 12, 3072)),
    ("large", (24, 1024, 16, 4096)),
    ("xlarge", (36, 1536, 24, 6144)),
])
def test_presets_match_table(name, dims):
    c = preset(name)
    assert (c.num_layers, c.hidden_size, c.num_heads, c.intermediate_size) == dims


def test_residual_mode_defaults():
    assert preset("xlarge").effective_residual_mode.value == "running_mean"
    assert preset("large").effective_residual_mode.value == "sum"
    assert preset("base", variant="post_ln").effective_residual_mode.value == "none"


def test_config_validation():
    with pytest.raises(ConfigError):
        preset("medium")
    with pytest.raises(ConfigError):
        ModelConfig(2, 10, 3, 8)
    with pytest.raises(ConfigError):
        preset("tiny", dropout_rate=1.0)
    with pytest.raises(ConfigError):
        preset("tiny", variant="realformer", residual_mode="none")
    with pytest.raises(ConfigError):
        preset("tiny", next_sentence=True)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**preset("tiny").to_dict(), "bogus": 1})
    c = preset("desk", seed=3)
    assert ModelConfig.from_dict(c.to_dict()) == c


def test_parameter_count_hand_count():
    V, H, I, S, L = 30522, 512, 2048, 512, 4
    emb = V * H + S * H + 2 * H + 2 * H
    per_layer = 4 * H * H + 2 * H + (H * I + I) + (I * H + H) + 2 * H
    head = H * H + H + 2 * H + V
    assert count_parameters(preset("small")) == emb + L * per_layer + head


def test_parameter_paths_unique_and_ordered():
    cfg = preset("tiny", variant="pre_ln")
    shapes = parameter_shapes(cfg)
    assert len(shapes) == len(set(shapes))
    assert list(shapes) == list(init_parameters(cfg))
    assert "final_ln.gamma" in shapes
    assert "final_ln.gamma" not in parameter_shapes(preset("tiny"))


def test_init_determinism_and_bounds():
    cfg = preset("desk")
    a, b = init_parameters(cfg), init_parameters(cfg)
    assert a.equal(b)
    assert not a.equal(init_parameters(cfg.replace(seed=1)))
    for k, v in a.items():
        if k.endswith("gamma"):
            assert np.all(v == 1.0)
        elif is_no_decay(k):
            assert np.all(v == 0.0)
        else:
            assert np.abs(v).max() <= 0.04


def test_init_std_matches_truncated_normal():
    cfg = ModelConfig(1, 64, 1, 64, vocab_size=2000, max_seq_len=8)
    w = init_parameters(cfg)["embeddings.token"]
    assert w.size >= 10**5
    want = 0.02 * truncnorm(-2, 2).std()
    assert abs(w.std() - want) / want < 0.03


def test_pre_ln_residual_scaling():
    base = init_parameters(preset("desk", variant="post_ln"))
    pre = init_parameters(preset("desk", variant="pre_ln"))
    s = 1 / math.sqrt(8)
    np.testing.assert_array_equal(pre["layer.2.ffn.out.weight"], base["layer.2.ffn.out.weight"] * s)
    np.testing.assert_array_equal(pre["layer.0.attention.output.weight"], base["layer.0.attention.output.weight"] * s)
    np.testing.assert_array_equal(pre["layer.0.attention.query.weight"], base["layer.0.attention.query.weight"])


def test_embed_examples(rng):
    cfg = preset("tiny", dropout_rate=0.0)
    store = init_parameters(cfg)
    zero = ParameterStore((k, np.zeros_like(v) if k.startswith("embeddings") and "gamma" not in k else v)
                          for k, v in store.items())
    ids = np.array([[2, 7, 3, 0]])
    np.testing.assert_array_equal(embed(as_constants(zero), cfg, ids).data, 0.0)
    p = as_constants(store)
    a = embed(p, cfg, np.array([[2, 7, 3], [2, 7, 3]])).data
    assert a[0].tobytes() == a[1].tobytes()
    # perturbation probe before LN: unit LN is skipped by using the raw sum
    ids2 = ids.copy()
    ids2[0, 1] = 9
    raw = lambda i: (store["embeddings.token"][i] + store["embeddings.position"][:4] + store["embeddings.segment"][0])  # noqa: E731
    diff = np.abs(raw(ids2[0]) - raw(ids[0])).sum(axis=-1)
    assert diff[1] > 0 and np.all(np.delete(diff, 1) == 0)
    e1, e2 = embed(p, cfg, ids).data, embed(p, cfg, ids2).data
    assert np.all(np.delete(np.abs(e1 - e2).sum(-1)[0], 1) == 0)


def test_embed_errors():
    cfg = preset("tiny")
    p = as_constants(init_parameters(cfg))
    with pytest.raises(DataError):
        embed(p, cfg, np.array([[2, 32]]))
    with pytest.raises(DataError):
        embed(p, cfg, np.zeros((1, 17), dtype=int))
    with pytest.raises(DataError):
        embed(p, cfg, np.array([[2, 3]]), np.array([[0, 2]]))


def test_mlm_logits_examples(rng):
    cfg = preset("tiny")
    store = init_parameters(cfg)
    p = as_constants(store)
    hidden = Tensor(np.zeros((2, 5, 16)))
    logits = mlm_logits(p, cfg, hidden, (np.array([0, 1, 1]), np.array([0, 2, 4])))
    assert logits.shape == (3, 32)
    np.testing.assert_allclose(T.softmax_rows(logits).data, 1 / 32, atol=1e-15)
    with pytest.raises(DataError):
        mlm_logits(p, cfg, hidden, (np.array([0]), np.array([5])))
    assert mlm_logits(p, cfg, Tensor(np.zeros((5, 16))), [1, 3]).shape == (2, 32)


def test_tied_embedding_gradient(rng):
    cfg = preset("tiny", dropout_rate=0.0, num_layers=1)
    store = init_parameters(cfg)
    ids = np.array([[2, 9, 11, 3]])
    table = store["embeddings.token"] * 20

    def f(t):
        params = as_constants(store)
        params["embeddings.token"] = t[0]
        out = encode(params, cfg, ids)
        logits = mlm_logits(params, cfg, out.hidden, (np.array([0, 0]), np.array([1, 2])))
        return mlm_loss(logits, np.array([9, 11]))[0]

    assert fd_check(f, [table]) < 1e-5
    # both uses contribute: decode-only rows (never embedded) still get gradient
    tape = Tape()
    params = as_constants(store)
    params["embeddings.token"] = tape.leaf("x0", table)
    out = encode(params, cfg, ids)
    g = T.backward(tape, mlm_loss(mlm_logits(params, cfg, out.hidden, (np.array([0]), np.array([1]))), [9])[0])["x0"]
    assert np.abs(g[20]).max() > 0 and np.abs(g[9]).max() > 0


def test_initial_loss_determined_by_seed():
    cfg = preset("tiny", dropout_rate=0.0)
    ids = np.array([[2, 9, 11, 3]])

    def loss(seed):
        p = as_constants(init_parameters(cfg.replace(seed=seed)))
        out = encode(p, cfg, ids)
        return mlm_loss(mlm_logits(p, cfg, out.hidden, (np.array([0]), np.array([1]))), [9])[0].item()

    assert loss(0) == loss(0)
    assert loss(0) != loss(1)


# checkpoints


def _save(tmp_path, name="a.ckpt", cfg=None):
    cfg = cfg or preset("tiny")
    path = tmp_path / name
    save_checkpoint(init_parameters(cfg), cfg, 7, path)
    return path, cfg


def test_checkpoint_round_trip_bytes(tmp_path):
    path, cfg = _save(tmp_path)
    ck = load_checkpoint(path)
    assert ck.step == 7 and ck.config == cfg
    assert ck.store.equal(init_parameters(cfg))
    save_checkpoint(ck.store, ck.config, ck.step, tmp_path / "b.ckpt")
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_header(tmp_path):
    path, _ = _save(tmp_path)
    raw = path.read_bytes()
    assert raw[:4] == b"RAFL"
    assert int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_corruption(tmp_path):
    path, _ = _save(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[-100] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_checkpoint_error_kinds(tmp_path):
    path, _ = _save(tmp_path)
    raw = path.read_bytes()
    (tmp_path / "m").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "m")
    (tmp_path / "v").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "v")
    (tmp_path / "t").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(tmp_path / "t")


def test_checkpoint_shape_mismatch_names_path(tmp_path):
    cfg = preset("small", vocab_size=100, max_seq_len=16)
    path, _ = _save(tmp_path, cfg=cfg)
    with pytest.raises(ShapeMismatchError, match="embeddings.token"):
        load_checkpoint(path, expect=preset("base", vocab_size=100, max_seq_len=16))
