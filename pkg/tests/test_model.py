import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvdirect import FullCache, KvBlock, Transformer, apply_rope, encode, greedy_decode, toy_config
from kvdirect.model import rope_matrix
from oracles import naive_attention_row

PROMPT = encode("Residual streams carry all the state.")


def test_rope_quarter_turn():
    out = apply_rope(np.array([1.0, 0.0], dtype=np.float32), math.pi / 2)
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-7)


def test_rope_position_zero_is_identity():
    x = np.random.default_rng(0).standard_normal(16).astype(np.float32)
    assert np.array_equal(apply_rope(x, 0), x)


def test_rope_rejects_odd_dim():
    with pytest.raises(ValueError):
        apply_rope(np.ones(3, dtype=np.float32), 1)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_rope_scores_depend_only_on_offset(m, n, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.standard_normal((2, 16))
    shifted = rope_matrix(m + 7, 16) @ q @ (rope_matrix(n + 7, 16) @ k)
    base = rope_matrix(m, 16) @ q @ (rope_matrix(n, 16) @ k)
    assert abs(shifted - base) < 1e-9 * (1 + abs(base))


def test_rope_matrix_is_orthogonal_and_matches_kernel():
    r = rope_matrix(37, 16)
    np.testing.assert_allclose(r @ r.T, np.eye(16), atol=1e-12)
    x = np.random.default_rng(1).standard_normal(16).astype(np.float32)
    np.testing.assert_allclose(apply_rope(x, 37), r @ x, atol=1e-5)


def test_batch_equals_incremental(toy_model):
    batch = toy_model.forward(PROMPT).logits
    cache = FullCache()
    rows = [toy_model.forward([t], cache).logits[0] for t in PROMPT]
    assert np.array_equal(np.stack(rows), batch)


def test_causality(toy_model):
    full = toy_model.forward(PROMPT + encode(" and more")).logits
    assert np.array_equal(full[:len(PROMPT)], toy_model.forward(PROMPT).logits)


def test_restart_from_any_layer_is_exact(toy_model):
    res = toy_model.forward(PROMPT, capture=True)
    positions = np.arange(len(PROMPT))
    for layer in range(toy_model.config.n_layers + 1):
        again = toy_model.logits_from_residuals(res.trace[layer], positions, layer)
        assert np.array_equal(again, res.logits), layer


def test_attention_matches_float64_oracle(toy_model):
    cfg = toy_model.config
    rng = np.random.default_rng(2)
    m = 9
    keys = rng.standard_normal((m, cfg.n_kv_heads, cfg.d_head)).astype(np.float32)
    vals = rng.standard_normal((m, cfg.n_kv_heads, cfg.d_head)).astype(np.float32)
    q = rng.standard_normal((1, cfg.n_q_heads, cfg.d_head)).astype(np.float32)
    kv = KvBlock(keys, vals, np.arange(m), np.arange(m))
    out, probs = toy_model.attend(0, q, [m - 1], kv)
    out = out.reshape(cfg.n_q_heads, cfg.d_head)
    for h in range(cfg.n_q_heads):
        g = h // cfg.group_size
        ref = naive_attention_row(q[0, h], keys[:, g], vals[:, g], 1 / math.sqrt(cfg.d_head))
        np.testing.assert_allclose(out[h], ref, atol=1e-5)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_gqa_heads_share_kv(toy_model):
    cfg = toy_model.config
    rng = np.random.default_rng(3)
    keys = rng.standard_normal((5, cfg.n_kv_heads, cfg.d_head)).astype(np.float32)
    vals = rng.standard_normal((5, cfg.n_kv_heads, cfg.d_head)).astype(np.float32)
    q = rng.standard_normal((1, cfg.n_q_heads, cfg.d_head)).astype(np.float32)
    base, _ = toy_model.attend(0, q, [4], KvBlock(keys, vals, np.arange(5), np.arange(5)))
    vals2 = vals.copy()
    vals2[:, 1] += 1
    moved, _ = toy_model.attend(0, q, [4], KvBlock(keys, vals2, np.arange(5), np.arange(5)))
    base, moved = base.reshape(cfg.n_q_heads, -1), moved.reshape(cfg.n_q_heads, -1)
    group0 = [h for h in range(cfg.n_q_heads) if h // cfg.group_size == 0]
    assert np.array_equal(base[group0], moved[group0])
    assert not np.array_equal(base, moved)


def test_sliding_visibility(sliding_model):
    mask = sliding_model.visibility(1, [10], np.arange(12))[0]
    assert mask.tolist() == [p in range(3, 11) for p in range(12)]
    assert sliding_model.visibility(0, [10], np.arange(12))[0].sum() == 11
    assert sliding_model.rope_positions(1, [10]).tolist() == [2]


def test_sliding_batch_equals_incremental(sliding_model):
    tokens = encode("x" * 5) + PROMPT
    batch = sliding_model.forward(tokens).logits
    cache = FullCache()
    rows = [sliding_model.forward([t], cache).logits[0] for t in tokens]
    assert np.array_equal(np.stack(rows), batch)


def test_input_errors(toy_model):
    with pytest.raises(ValueError, match="vocabulary"):
        toy_model.forward([256])
    with pytest.raises(ValueError):
        toy_model.forward([])
    small = Transformer(toy_config(max_positions=4))
    with pytest.raises(ValueError, match="max_positions"):
        small.forward([1, 2, 3, 4, 5])


def test_greedy_is_deterministic(toy_model):
    a = greedy_decode(toy_model, PROMPT, 5, FullCache())
    assert a == greedy_decode(toy_model, PROMPT, 5, FullCache())
    assert all(0 <= t < 256 for t in a)


def test_encode():
    assert encode("Aé") == [65, 0xC3, 0xA9]
    assert encode(b"\x00\xff") == [0, 255]
