import numpy as np
import pytest

from app.errors import ConfigError, InputError, NumericError
from app.services.linalg import LN_EPS, random_permutation, permute_cols, relative_error
from app.services.transformer import (
    Model, ModelConfig, TransformerLayerWeights, argmax_agreement, attention_weights, count_flops,
    init_layer, init_model, layer_forward, layer_trace, mean_cosine_similarity, model_forward,
)
from tests.conftest import tiny_config, tokens_for


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(num_heads=3)
    with pytest.raises(ConfigError):
        tiny_config(num_layers=0, auth_position=None)
    with pytest.raises(ConfigError):
        tiny_config(auth_position=4)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"num_layers": 2, "d_model": 4, "num_heads": 1, "d_ffn": 4,
                               "seq_len": 2, "vocab_size": 8, "colour": "red"})


def test_default_auth_position_is_middle():
    assert tiny_config(num_layers=8, auth_position=None).resolved_auth_position() == 4
    assert tiny_config(num_layers=2, auth_position=None).resolved_auth_position() == 1


def test_engine_rejects_gated_ffn_configs():
    with pytest.raises(ConfigError):
        init_model(tiny_config(ffn_projections=3), seed=0)


def test_zero_input_gives_zero_output():
    cfg = tiny_config()
    w = init_layer(cfg, np.random.default_rng(0))
    d, f = cfg.d_model, cfg.d_ffn
    w = w.replace(
        gamma1=np.ones(d, np.float32), beta1=np.zeros(d, np.float32),
        gamma2=np.ones(d, np.float32), beta2=np.zeros(d, np.float32),
        b_m=np.zeros(f, np.float32), b_n=np.zeros(d, np.float32),
    )
    z = layer_forward(w, np.zeros((cfg.seq_len, d), np.float32), cfg)
    assert np.array_equal(z, np.zeros_like(z))


def test_single_token_layer_by_hand():
    cfg = ModelConfig(num_layers=1, d_model=2, num_heads=1, d_ffn=2, seq_len=1, vocab_size=2)
    eye = np.eye(2, dtype=np.float32)
    zero = np.zeros(2, np.float32)
    w = TransformerLayerWeights(
        w_q=eye, w_k=eye, w_v=eye, w_o=eye, gamma1=np.ones(2, np.float32), beta1=zero,
        w_m=eye, b_m=zero, w_n=2 * eye, b_n=zero, gamma2=np.ones(2, np.float32), beta2=zero,
    )
    x = np.array([[1.0, 3.0]], np.float32)
    # one token attends to itself: o = x, x + o = [2, 6], mean 4, variance 4
    a = 2.0 / np.sqrt(4.0 + LN_EPS)
    y = np.array([-a, a])
    # m = ReLU(y) = [0, a], n = 2m, y + n = [-a, 3a], mean a, variance 4a^2
    z = np.array([-2 * a, 2 * a]) / np.sqrt(4 * a * a + LN_EPS)
    assert np.allclose(layer_forward(w, x, cfg)[0], z, atol=1e-6)


def test_causal_mask_hides_future_rows(model, cfg):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(cfg.seq_len, cfg.d_model)).astype(np.float32)
    x2 = x.copy()
    x2[-1] = rng.normal(size=cfg.d_model)
    w = model.layers[0]
    assert np.allclose(layer_forward(w, x, cfg)[0], layer_forward(w, x2, cfg)[0], atol=1e-6)
    assert not np.allclose(layer_forward(w, x, cfg)[-1], layer_forward(w, x2, cfg)[-1])


def test_attention_rows_sum_to_one(model, cfg):
    x = np.random.default_rng(2).normal(size=(cfg.seq_len, cfg.d_model)).astype(np.float32)
    tr = layer_trace(model.layers[0], x, cfg)
    att = attention_weights(tr.q, tr.k, cfg)
    assert att.shape == (cfg.num_heads, cfg.seq_len, cfg.seq_len)
    assert np.allclose(att.sum(axis=-1), 1.0, atol=1e-6)


def test_plain_layer_is_not_permutation_equivariant(model, cfg):
    x = np.random.default_rng(3).normal(size=(cfg.seq_len, cfg.d_model)).astype(np.float32)
    pi = random_permutation(4, cfg.d_model)
    assert not pi.is_identity()
    w = model.layers[1]
    moved = layer_forward(w, permute_cols(x, pi), cfg)
    assert relative_error(moved, permute_cols(layer_forward(w, x, cfg), pi)) > 0.1


def test_non_finite_input_names_layer(model, cfg):
    x = np.zeros((cfg.seq_len, cfg.d_model), np.float32)
    x[0, 0] = np.inf
    with pytest.raises(NumericError) as err:
        layer_forward(model.layers[2], x, cfg, layer_index=2)
    assert err.value.layer_index == 2


def test_model_forward_is_deterministic(model, cfg):
    toks = tokens_for(cfg, 1)[0]
    a, b = model_forward(model, toks), model_forward(model, toks)
    assert a.shape == (cfg.seq_len, cfg.vocab_size)
    assert np.array_equal(a, b)
    assert argmax_agreement(a, b) == 1.0
    assert mean_cosine_similarity(a, b) == pytest.approx(1.0)


def test_batched_forward_matches_single(model, cfg):
    toks = tokens_for(cfg, 3)
    batch = model_forward(model, toks)
    assert batch.shape == (3, cfg.seq_len, cfg.vocab_size)
    assert np.allclose(batch[1], model_forward(model, toks[1]), atol=1e-5)


def test_bad_tokens_rejected(model, cfg):
    toks = tokens_for(cfg, 1)[0]
    toks[0] = cfg.vocab_size
    with pytest.raises(InputError):
        model_forward(model, toks)
    with pytest.raises(InputError):
        model_forward(model, np.zeros(cfg.seq_len + 1, dtype=np.int64))
    with pytest.raises(InputError):
        model_forward(model, np.zeros(cfg.seq_len, dtype=np.float32))


def test_model_layer_count_checked(model):
    with pytest.raises(ConfigError):
        Model(config=model.config, embedding=model.embedding, layers=model.layers[:-1],
              output_head=model.output_head)


def test_flops_scaling_in_seq_len():
    a = count_flops(tiny_config(seq_len=8))
    b = count_flops(tiny_config(seq_len=16))
    assert b.matmul == 2 * a.matmul
    assert b.attention == 4 * a.attention


def test_flops_all_ones_by_hand():
    cfg = ModelConfig(num_layers=1, d_model=1, num_heads=1, d_ffn=1, seq_len=1, vocab_size=1)
    fl = count_flops(cfg)
    # matmuls 2*(4 + 2) = 12; scores and values 4; softmax 5, residuals 2, two norms 14, b_n 1, FFN 2
    assert (fl.matmul, fl.attention, fl.elementwise) == (12, 4, 24)
    assert fl.total == fl.per_layer == 40
    assert fl.head == 2


def _instruction_count(cfg: ModelConfig) -> int:
    """Walks one layer op by op and tallies arithmetic."""
    l, d, h, f = cfg.seq_len, cfg.d_model, cfg.num_heads, cfg.d_ffn
    dh = d // h
    ops = 0

    def mm(rows, inner, cols):
        return rows * cols * (inner + inner)  # one multiply and one add per inner step

    ops += 3 * mm(l, d, d)                       # Q, K, V
    ops += h * mm(l, dh, l)                      # scores
    ops += h * l * l * 5                         # scale, mask, exp, sum, divide
    ops += h * mm(l, l, dh)                      # weighted values
    ops += mm(l, d, d)                           # W_o
    for _ in range(2):
        ops += l * d                             # residual add
        ops += l * d * 7                         # layer norm
    ops += mm(l, d, f) + l * f + l * f           # W_m, b_m, ReLU
    ops += mm(l, f, d) + l * d                   # W_n, b_n
    return ops


@pytest.mark.parametrize("shape", [(1, 1, 1, 1), (2, 4, 2, 3), (3, 4, 4, 8), (4, 2, 1, 4)])
def test_flops_matches_instruction_count(shape):
    l, d, h, f = shape
    cfg = ModelConfig(num_layers=3, d_model=d, num_heads=h, d_ffn=f, seq_len=l, vocab_size=5)
    fl = count_flops(cfg)
    assert fl.per_layer == _instruction_count(cfg)
    assert fl.total == 3 * fl.per_layer


def test_flops_monotone_in_every_field():
    base = tiny_config()
    ref = count_flops(base).total
    for field_name in ("num_layers", "d_model", "d_ffn", "seq_len", "num_heads", "ffn_projections"):
        value = getattr(base, field_name)
        bumped = base.with_overrides(**{field_name: value * 2})
        assert count_flops(bumped).total > ref, field_name


def test_llama3_total_near_reported(presets):
    fl = count_flops(presets["LLaMA3"])
    assert abs(fl.total - 1.92e12) / 1.92e12 < 0.10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_models_spread_argmax_over_vocab(seed):
    cfg = tiny_config()
    top = model_forward(init_model(cfg, seed), tokens_for(cfg, 100, seed=seed)).argmax(axis=-1).ravel()
    counts = np.bincount(top, minlength=cfg.vocab_size)
    assert np.count_nonzero(counts) >= cfg.vocab_size // 4
    assert counts.max() / top.size < 0.25


def test_ffn_units_come_in_mirrored_pairs():
    cfg = tiny_config()
    w = init_layer(cfg, np.random.default_rng(1))
    half = cfg.d_ffn // 2
    assert np.array_equal(w.w_m[:, half:], -w.w_m[:, :half])
    assert np.array_equal(w.w_n[half:], w.w_n[:half])
    assert not w.b_m.any()
    y = np.random.default_rng(2).normal(size=(cfg.seq_len, cfg.d_model)).astype(np.float32)

    def branch(v):
        return np.maximum(v @ w.w_m, 0) @ w.w_n

    np.testing.assert_allclose(branch(y), branch(-y), rtol=1e-5, atol=1e-4)
