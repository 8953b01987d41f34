"""Encoder tests: parameter accounting, toggle equivalences, position
tables, attention/FFN against direct numpy references, persistence."""

import math

import numpy as np
import pytest

from cramlab.errors import ConfigurationError, ContractError
from cramlab.model import (
    Model, ModelConfig, attention, build, ffn, layer_norm_identity,
    param_count, rotary_tables, sinusoidal_table,
)
from cramlab.tensor import Tensor


def small_config(**kw) -> ModelConfig:
    base = dict(num_layers=2, hidden_dim=32, num_heads=4, ffn_dim=64,
                vocab_size=64, seq_len=16)
    base.update(kw)
    return ModelConfig(**base)


def np_gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


# -- parameter accounting --------------------------------------------------------

def test_param_count_small_config_closed_form():
    # tok_emb 2048 + pos_scale 1 + emb_norm 64
    # + 2 layers * (4*32*32 + 2*64 + 32*64 + 32*32) + final_norm 64
    assert param_count(small_config()) == 16769


@pytest.mark.parametrize("kw", [
    {},
    {"ffn_kind": "gelu"},
    {"norm_placement": "post"},
    {"embedding_kind": "learned"},
    {"embedding_kind": "sinusoidal"},
    {"embedding_kind": "rotary"},
    {"qkv_bias": True, "linear_bias": True, "decoder_bias": True},
    {"nonlinear_head": True},
    {"nonlinear_head": True, "linear_bias": True},
    {"tie_embeddings": False},
    {"final_norm": False, "embedding_norm": False},
    {"num_layers": 0},
])
def test_param_count_matches_enumeration(kw):
    cfg = small_config(**kw)
    model = build(cfg, seed=1)
    assert sum(p.data.size for p in model.params.values()) == param_count(cfg)


def test_build_deterministic_by_seed():
    a = build(small_config(), seed=3)
    b = build(small_config(), seed=3)
    c = build(small_config(), seed=4)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes()
               for n in a.params)


def test_tied_embeddings_share_storage():
    tied = build(small_config(), seed=0)
    assert "decoder" not in tied.params
    untied = build(small_config(tie_embeddings=False), seed=0)
    assert untied.params["decoder"].shape == untied.params["tok_emb"].shape


def test_decay_exemptions():
    assert Model.decay_exempt("emb_norm_gain")
    assert Model.decay_exempt("l0_attn_norm_bias")
    assert Model.decay_exempt("pos_scale")
    assert not Model.decay_exempt("tok_emb")
    assert not Model.decay_exempt("l1_wq")


# -- position tables -------------------------------------------------------------

def test_sinusoidal_table_frozen_values():
    t = sinusoidal_table(8, 6, np.float64)
    assert t.shape == (8, 6)
    # position 0: sin(0)=0 at even slots, cos(0)=1 at odd slots
    assert np.allclose(t[0], [0, 1, 0, 1, 0, 1])
    assert abs(t[1, 0] - math.sin(1.0)) < 1e-12
    assert abs(t[1, 1] - math.cos(1.0)) < 1e-12
    assert abs(t[3, 2] - math.sin(3.0 / 10000 ** (2 / 6))) < 1e-12
    assert abs(t[5, 5] - math.cos(5.0 / 10000 ** (4 / 6))) < 1e-12
    with pytest.raises(ConfigurationError):
        sinusoidal_table(4, 5)


def test_rotary_tables_shape_and_position_zero():
    cos, sin = rotary_tables(7, 8, np.float64)
    assert cos.shape == sin.shape == (7, 8)
    assert np.allclose(cos[0], 1.0) and np.allclose(sin[0], 0.0)
    # frequencies duplicated across the two halves
    assert np.allclose(cos[:, :4], cos[:, 4:])
    assert abs(sin[2, 1] - math.sin(2.0 / 10000 ** (2 / 8))) < 1e-12


def test_scaled_sinusoidal_initial_scale():
    model = build(small_config(), seed=0)
    assert model.params["pos_scale"].data.shape == (1,)
    assert abs(float(model.params["pos_scale"].data[0]) - 1 / math.sqrt(32)) < 1e-7


# -- attention and ffn against numpy ---------------------------------------------

def test_attention_single_head_matches_numpy():
    cfg = small_config(hidden_dim=4, num_heads=1, ffn_dim=8)
    model = build(cfg, seed=5)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 4)).astype(np.float32)
    got = attention(Tensor(x), model.params, cfg, layer=0).data

    p = {k: v.data for k, v in model.params.items()}
    want = np.empty_like(x)
    for b in range(2):
        q = x[b] @ p["l0_wq"]
        k = x[b] @ p["l0_wk"]
        v = x[b] @ p["l0_wv"]
        s = q @ k.T / math.sqrt(4)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        want[b] = (a @ v) @ p["l0_wo"]
    assert np.allclose(got, want, atol=1e-5)


def test_attention_multi_head_differs_from_single_reshape():
    # heads partition the width: outputs must change when head count does
    cfg1 = small_config(hidden_dim=8, num_heads=1, ffn_dim=8)
    cfg2 = small_config(hidden_dim=8, num_heads=2, ffn_dim=8)
    m = build(cfg1, seed=7)
    x = Tensor(np.random.default_rng(8).standard_normal((1, 5, 8)).astype(np.float32))
    out1 = attention(x, m.params, cfg1, 0).data
    out2 = attention(x, m.params, cfg2, 0).data
    assert not np.allclose(out1, out2)


def test_ffn_glu_matches_numpy():
    cfg = small_config(hidden_dim=4, num_heads=1, ffn_dim=8)
    model = build(cfg, seed=9)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 4)).astype(np.float32)
    got = ffn(Tensor(x), model.params, cfg, 0).data
    w1 = model.params["l0_w1"].data
    w2 = model.params["l0_w2"].data
    h = x.reshape(6, 4) @ w1
    out = (h[:, :4] * np_gelu(h[:, 4:])) @ w2
    assert np.allclose(got, out.reshape(2, 3, 4), atol=1e-5)


def test_ffn_plain_gelu_matches_numpy():
    cfg = small_config(hidden_dim=4, num_heads=1, ffn_dim=8, ffn_kind="gelu")
    model = build(cfg, seed=11)
    x = np.random.default_rng(12).standard_normal((1, 3, 4)).astype(np.float32)
    got = ffn(Tensor(x), model.params, cfg, 0).data
    h = np_gelu(x.reshape(3, 4) @ model.params["l0_w1"].data)
    want = (h @ model.params["l0_w2"].data).reshape(1, 3, 4)
    assert np.allclose(got, want, atol=1e-5)


def test_key_mask_blocks_padded_keys():
    cfg = small_config()
    model = build(cfg, seed=13)
    rng = np.random.default_rng(14)
    ids = rng.integers(6, 64, size=(2, 16))
    mask = np.ones((2, 16), bool)
    mask[:, -3:] = False
    base = model.encode(ids, key_mask=mask).data
    ids2 = ids.copy()
    ids2[:, -3:] = rng.integers(6, 64, size=(2, 3))  # only padded slots change
    again = model.encode(ids2, key_mask=mask).data
    # non-pad positions cannot see the padded keys
    assert np.allclose(base[:, :-3], again[:, :-3], atol=1e-6)
    assert not np.allclose(base, model.encode(ids2).data, atol=1e-6)


# -- toggle equivalences ----------------------------------------------------------

def test_pre_and_post_norm_agree_when_norms_are_identity():
    ids = np.random.default_rng(15).integers(6, 64, size=(2, 16))
    pre = build(small_config(norm_placement="pre"), seed=16)
    post = build(small_config(norm_placement="post"), seed=16)
    with layer_norm_identity():
        a = pre.encode(ids).data
        b = post.encode(ids).data
    assert np.array_equal(a, b)
    # the hook must restore real norms on exit
    assert not np.allclose(pre.encode(ids).data, a, atol=1e-3)


def test_sparse_and_dense_prediction_agree():
    ids = np.random.default_rng(17).integers(6, 64, size=(2, 16))
    masked = np.array([1, 5, 17, 30])
    sparse = build(small_config(sparse_prediction=True), seed=18)
    dense = build(small_config(sparse_prediction=False), seed=18)
    ls = sparse.logits(ids, masked_positions=masked).data
    ld = dense.logits(ids, masked_positions=masked).data
    assert ls.shape == ld.shape == (4, 64)
    assert np.allclose(ls, ld, atol=1e-5)


def test_dense_without_positions_returns_all_rows():
    model = build(small_config(sparse_prediction=False), seed=19)
    ids = np.random.default_rng(20).integers(6, 64, size=(2, 16))
    assert model.logits(ids).data.shape == (32, 64)


@pytest.mark.parametrize("kind", ["learned", "sinusoidal", "rotary"])
def test_alternative_embeddings_run(kind):
    model = build(small_config(embedding_kind=kind), seed=21)
    ids = np.random.default_rng(22).integers(6, 64, size=(1, 16))
    out = model.encode(ids)
    assert out.shape == (1, 16, 32)
    assert np.isfinite(out.data).all()


def test_rotary_position_dependence():
    # same token at two positions must produce different hidden states
    model = build(small_config(embedding_kind="rotary", embedding_norm=False,
                               final_norm=False, num_layers=1), seed=23)
    ids = np.full((1, 16), 7)
    ids[0, 3] = 9
    out = model.encode(ids).data[0]
    assert not np.allclose(out[0], out[1], atol=1e-6)


def test_nonlinear_head_changes_logits_only():
    plain = build(small_config(), seed=24)
    headed = build(small_config(nonlinear_head=True), seed=24)
    ids = np.random.default_rng(25).integers(6, 64, size=(1, 16))
    assert np.allclose(plain.encode(ids).data, headed.encode(ids).data)
    assert not np.allclose(plain.logits(ids, masked_positions=[2]).data,
                           headed.logits(ids, masked_positions=[2]).data)


# -- input validation --------------------------------------------------------------

def test_encode_validates_batch():
    model = build(small_config(), seed=26)
    with pytest.raises(ContractError):
        model.encode(np.zeros(16, int))
    with pytest.raises(ContractError):
        model.encode(np.zeros((1, 8), int))
    with pytest.raises(IndexError):
        model.encode(np.full((1, 16), 64))
    with pytest.raises(ContractError):
        model.encode(np.zeros((1, 16), int), dropout_rate=0.5)


@pytest.mark.parametrize("kw", [
    {"num_heads": 5},
    {"hidden_dim": 33, "num_heads": 3},
    {"ffn_dim": 63},
    {"ffn_kind": "relu"},
    {"norm_placement": "sandwich"},
    {"embedding_kind": "alibi"},
    {"vocab_size": 4},
    {"vocab_size": 70000},
    {"dropout_rate": 1.0},
    {"layer_norm_eps": 0.0},
    {"num_heads": 16, "hidden_dim": 16, "embedding_kind": "rotary"},
])
def test_config_validation_rejects(kw):
    with pytest.raises(ConfigurationError):
        small_config(**kw).validate()


# -- persistence --------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = build(small_config(qkv_bias=True, nonlinear_head=True), seed=27)
    ids = np.random.default_rng(28).integers(6, 64, size=(2, 16))
    want = model.logits(ids, masked_positions=[0, 9]).data
    path = str(tmp_path / "ck")
    model.save(path)
    back = Model.load(path)
    assert back.config == model.config
    for name, p in model.params.items():
        assert np.array_equal(back.params[name].data, p.data)
    assert np.allclose(back.logits(ids, masked_positions=[0, 9]).data, want)


def test_checkpoint_detects_missing_param(tmp_path):
    from cramlab import checkpoint as ckpt
    model = build(small_config(), seed=29)
    path = str(tmp_path / "ck")
    arrays = {k: v.data for k, v in model.params.items()}
    arrays.pop("l1_wq")
    ckpt.save_checkpoint(path, arrays, model.config.to_strs())
    with pytest.raises(ContractError):
        Model.load(path)
