from dataclasses import replace

import numpy as np
import pytest

from app.errors import LockError, VerificationError
from app.services.linalg import PermutationKey, invert, permute_cols, permute_rows, random_permutation, relative_error
from app.services.locking import (
    EQUIVALENCE_LINES, LockKeys, generate_keys, lock_layer, lock_model, locked_fraction,
    original_auth_weights, permuted_parameter_count, verify_lock,
)
from app.services.runtime import run_unauthorized
from app.services.transformer import init_layer, layer_forward, model_forward
from tests.conftest import tiny_config, tokens_for


def _layer(cfg, seed=0):
    return init_layer(cfg, np.random.default_rng(seed))


def test_identity_key_leaves_layer_bitwise():
    cfg = tiny_config(d_model=8, d_ffn=16)
    w = _layer(cfg)
    locked = lock_layer(w, PermutationKey.identity(8))
    for name, t in w.tensors().items():
        assert np.array_equal(locked.tensors()[name], t), name


def test_locked_layer_equivalence():
    cfg = tiny_config(d_model=8, d_ffn=16, num_heads=2, seq_len=4)
    rng = np.random.default_rng(1)
    for seed in range(5):
        w = _layer(cfg, seed)
        pi = random_permutation(100 + seed, cfg.d_model)
        x = rng.normal(size=(cfg.seq_len, cfg.d_model)).astype(np.float32)
        got = layer_forward(lock_layer(w, pi), permute_cols(x, pi), cfg)
        want = permute_cols(layer_forward(w, x, cfg), pi)
        assert relative_error(got, want) <= 1e-4


def test_locked_layer_scrambles_plain_input():
    cfg = tiny_config()
    w = _layer(cfg, 3)
    pi = random_permutation(5, cfg.d_model)
    x = np.random.default_rng(2).normal(size=(cfg.seq_len, cfg.d_model)).astype(np.float32)
    assert relative_error(layer_forward(lock_layer(w, pi), x, cfg), layer_forward(w, x, cfg)) > 0.1


def test_lock_then_inverse_restores_bitwise():
    cfg = tiny_config()
    w = _layer(cfg, 4)
    pi = random_permutation(6, cfg.d_model)
    back = lock_layer(lock_layer(w, pi), invert(pi))
    for name, t in w.tensors().items():
        assert np.array_equal(back.tensors()[name], t), name


def test_bias_of_ffn_input_untouched():
    cfg = tiny_config()
    w = _layer(cfg, 5)
    locked = lock_layer(w, random_permutation(7, cfg.d_model))
    assert locked.b_m is w.b_m


def test_lock_layer_key_size_checked():
    cfg = tiny_config()
    with pytest.raises(LockError):
        lock_layer(_layer(cfg), random_permutation(0, cfg.d_model + 1))


def test_lock_model_layout(model, keys, locked):
    cfg = model.config
    l0 = cfg.auth_position
    assert len(locked.front_layers) == l0 - 1
    assert len(locked.rear_layers) == cfg.num_layers - l0
    for i, w in enumerate(locked.front_layers):
        for name, t in w.tensors().items():
            assert np.array_equal(t, model.layers[i].tensors()[name])
    auth = model.layers[l0 - 1]
    assert np.array_equal(locked.auth_block.w_n_enc, permute_rows(auth.w_n, keys.pi_enc))
    assert np.array_equal(locked.auth_block.gamma2, auth.gamma2)
    assert np.array_equal(locked.output_head, permute_rows(model.output_head, keys.pi))
    assert np.array_equal(original_auth_weights(locked, keys), auth.w_n)


def test_identity_keys_reproduce_original(model):
    cfg = model.config
    ident = LockKeys.identity(cfg.d_model, cfg.d_ffn)
    locked = lock_model(model, ident, cfg.auth_position)
    toks = tokens_for(cfg, 4)
    assert np.allclose(run_unauthorized(locked, toks), model_forward(model, toks), atol=1e-6)


def test_lock_model_rejects_bad_positions_and_keys(model, keys):
    cfg = model.config
    for l0 in (0, cfg.num_layers):
        with pytest.raises(LockError):
            lock_model(model, keys, l0)
    wrong = LockKeys(pi=keys.pi, pi_enc=random_permutation(0, cfg.d_ffn + 1))
    with pytest.raises(LockError):
        lock_model(model, wrong, cfg.auth_position)


def test_generate_keys_independent_and_deterministic(cfg):
    a, b = generate_keys(cfg, 1), generate_keys(cfg, 1)
    assert a.pi == b.pi and a.pi_enc == b.pi_enc
    assert a.pi.size == cfg.d_model and a.pi_enc.size == cfg.d_ffn
    assert generate_keys(cfg, 2).pi != a.pi


def test_permuted_parameter_count(cfg):
    per_layer = 4 * 16 * 16 + 4 * 16 + 2 * 16 * 32 + 32 + 16
    assert cfg.layer_parameter_count() == per_layer
    assert permuted_parameter_count(cfg, 2) == 2 * per_layer + 16 * 64
    assert permuted_parameter_count(cfg, 3) == per_layer + 16 * 64


def test_locked_fraction_strictly_decreasing():
    cfg = tiny_config(num_layers=8, auth_position=None)
    fractions = [locked_fraction(cfg, l0) for l0 in range(1, 8)]
    assert all(a > b for a, b in zip(fractions, fractions[1:]))
    assert fractions[-1] == pytest.approx((cfg.layer_parameter_count() + 16 * 64) / cfg.parameter_count())


def test_verify_fresh_lock_passes(model, keys, locked):
    report = verify_lock(model, locked, keys)
    assert report.ok
    errors = report.max_errors()
    for label, _, _ in EQUIVALENCE_LINES:
        assert errors[label] <= 1e-4
    assert errors["W'_n"] == 0.0
    assert errors["bitwise"] == 0.0


def test_verify_identity_keys_passes(model):
    cfg = model.config
    ident = LockKeys.identity(cfg.d_model, cfg.d_ffn)
    assert verify_lock(model, lock_model(model, ident, 1), ident).ok


def test_verify_names_faulty_line(model, keys, locked):
    rear = list(locked.rear_layers)
    noise = np.random.default_rng(9).normal(size=rear[0].w_q.shape).astype(np.float32)
    rear[0] = rear[0].replace(w_q=noise)
    broken = replace(locked, rear_layers=tuple(rear))
    with pytest.raises(VerificationError) as err:
        verify_lock(model, broken, keys)
    assert err.value.line == "Q'"
    assert err.value.layer == f"rear.{locked.auth_position}"
    assert not err.value.report.ok

    report = verify_lock(model, broken, keys, raise_on_failure=False)
    assert report.first_failure().line == "Q'"
