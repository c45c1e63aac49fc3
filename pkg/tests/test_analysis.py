import numpy as np
import pytest

from kvdirect import StrategySpec, encode
from kvdirect.analysis import (PatchSpec, bilinear_matrix, bilinear_spectrum, budget_sweep,
                               effective_rank, energy_curve, pad_pair, patch_and_continue,
                               rank_truncated_generate, reconstruction_errors, teacher_forced_logits,
                               truncated_query_weights, truncation_bound_check)

PROMPT = encode("Fidelity is measured against a full cache.")


def test_reconstruction_pattern(sliding_model):
    rows = reconstruction_errors(sliding_model, encode("a sliding window of eight tokens, here"))
    for r in rows:
        assert r.max_dv == 0.0 and r.max_dk_local == 0.0
        if r.kind == "G":
            assert r.max_dk_absolute == 0.0
        else:
            assert r.max_dk_absolute > 0.0


def test_pad_pair():
    assert pad_pair([1, 2, 3], [4]) == ([1, 2, 3], [4, 0x20, 0x20])


def test_patch_every_layer_is_lossless(toy_model):
    res = patch_and_continue(toy_model, PatchSpec(b"What is two plus two?", b"Name a colour."), n_new=3)
    assert set(res.kl_per_layer) == set(range(toy_model.config.n_layers + 1))
    assert res.all_zero and res.continuations_match


def test_patch_rejects_bad_layers(toy_model):
    with pytest.raises(ValueError):
        patch_and_continue(toy_model, PatchSpec(b"ab", b"cd", layers=(9,)), n_new=1)
    with pytest.raises(ValueError, match="lengths"):
        patch_and_continue(toy_model, PatchSpec(b"abc", b"d"), n_new=1, pad=False)


def test_energy_and_rank_examples():
    s = np.array([2.0, 1.0, 1.0, 0.0])
    np.testing.assert_allclose(energy_curve(s, 3), [4 / 6, 5 / 6, 1.0])
    assert [effective_rank(s, t, 3) for t in (0.5, 0.8, 0.9, 1.0)] == [1, 2, 3, 3]
    with pytest.raises(ValueError):
        effective_rank(s, 0.0)
    with pytest.raises(ValueError):
        energy_curve(np.zeros(3))


def test_bilinear_matrix_matches_float64_product(toy_model):
    cfg, lw = toy_model.config, toy_model.weights.layers[2]
    dh = cfg.d_head
    m64 = lw.w_q[:, 3 * dh:4 * dh].astype(np.float64) @ lw.w_k[:, dh:2 * dh].astype(np.float64).T
    np.testing.assert_allclose(bilinear_matrix(toy_model, 2, 3), m64, atol=1e-6)


def test_spectrum_rank_is_at_most_d_head(toy_model):
    rep = bilinear_spectrum(toy_model, 0)
    dh = toy_model.config.d_head
    for h in rep.heads:
        assert h.singular_values[dh:].max() < 1e-5 * h.singular_values[0]
        assert h.effective_ranks[0.99] <= dh
    assert 1 <= rep.mean_rank(0.9) <= dh


def test_bound_check_rank_range(toy_model):
    with pytest.raises(ValueError):
        truncation_bound_check(toy_model, 0, 0, 0)
    with pytest.raises(ValueError):
        truncation_bound_check(toy_model, 0, 0, toy_model.config.d_head)
    assert truncation_bound_check(toy_model, 1, 2, 4, n_pairs=200).holds


def test_truncated_query_weights_reproduce_low_rank_form(toy_model):
    dh = toy_model.config.d_head
    assert truncated_query_weights(toy_model, dh) == {}
    wq = truncated_query_weights(toy_model, 3)[1].astype(np.float64)
    wk = toy_model.weights.layers[1].w_k.astype(np.float64)
    m_trunc = wq[:, :dh] @ wk[:, :dh].T
    s = np.linalg.svd(m_trunc, compute_uv=False)
    assert s[3] < 1e-5 * s[0]
    with pytest.raises(ValueError):
        truncated_query_weights(toy_model, dh + 1)


def test_teacher_forced_full_cache_matches_reference(toy_model):
    cont = encode(" next")
    ref = teacher_forced_logits(toy_model, PROMPT, cont)
    full = teacher_forced_logits(toy_model, PROMPT, cont, StrategySpec("full"))
    kvd = teacher_forced_logits(toy_model, PROMPT, cont, StrategySpec("kvdirect", 2))
    for a, b, c in zip(ref, full, kvd):
        assert np.array_equal(a, b) and np.array_equal(a, c)


def test_small_sweep_and_rank_trend(toy_model):
    specs = [StrategySpec("kvdirect"), StrategySpec("window")]
    sweep = budget_sweep(toy_model, [PROMPT], specs, [2, 4], n_new=6)
    assert all(c.fidelity.match == 1.0 for c in sweep.row("kvdirect"))
    assert sweep.get("window", 2).fidelity.n_steps == 6
    full = rank_truncated_generate(toy_model, toy_model.config.d_head, [PROMPT], 4)
    assert full.fidelity.match == 1.0 and full.fidelity.kl_max == 0.0
