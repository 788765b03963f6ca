from dataclasses import replace

import numpy as np
import pytest

from pmurecon import numcore as nc
from pmurecon.datagen import MeasurementWindow, MissingSchedule, ModalConfig, generate_windows, inject_missing
from pmurecon.lowrank import (LowRankConfig, Normalizer, init_khop_gat, init_pek_gcn, init_self_attention,
                              khop_gat_forward, lowrank_forward, mean_fill, nuclear_norm, pek_gcn_forward,
                              regularized_nuclear_norm, self_attention_forward, train_lowrank)
from pmurecon.numcore import ParamStore

from gradcases import OPS
from oracles import gat_reference, pek_gcn_reference


def hop_sets(ops):
    return [[list(ops.neighbors(i, k)) for k in range(1, ops.K + 1)] for i in range(ops.n)]


# ---------------------------------------------------------------- layers against loop oracles


@pytest.mark.parametrize("edge", [False, True])
def test_gat_matches_reference(edge):
    rng = np.random.default_rng(3)
    s = ParamStore()
    init_khop_gat(s, rng, "g", OPS.K, 3, 4, edge_features=edge)
    H = rng.normal(size=(OPS.n, 3))
    E = rng.normal(size=(OPS.n, OPS.n)) if edge else None
    got = khop_gat_forward(H, OPS, s, "g", edge=E).data
    ref = gat_reference(H, hop_sets(OPS), [s[f"g.hop{k}.W1"] for k in (1, 2)],
                        [s[f"g.hop{k}.W2"] for k in (1, 2)], [s[f"g.hop{k}.a"] for k in (1, 2)],
                        s["g.Wroot"], 0.2, E)
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_gat_attention_rows_are_distributions():
    rng = np.random.default_rng(4)
    s = ParamStore()
    init_khop_gat(s, rng, "g", OPS.K, 3, 4)
    _, weights = khop_gat_forward(rng.normal(size=(OPS.n, 3)), OPS, s, "g", return_weights=True)
    for k, w in enumerate(weights, start=1):
        assert np.allclose(w.data.sum(axis=-1), 1.0)
        outside = ~OPS.hop_mask[k - 1] & ~np.eye(OPS.n, dtype=bool)
        assert np.all(w.data[outside] == 0)


def test_pek_gcn_matches_reference():
    rng = np.random.default_rng(5)
    s = ParamStore()
    init_pek_gcn(s, rng, "p", OPS.K, 3, 4, 2)
    s["p.B"] = rng.normal(size=2)
    H = rng.normal(size=(OPS.n, 3))
    got = pek_gcn_forward(H, OPS, s, "p").data
    ref = pek_gcn_reference(H, OPS.S, [s["p.hop1.W"], s["p.hop2.W"]], s["p.W"], s["p.B"])
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_pek_gcn_relabel_equivariance():
    rng = np.random.default_rng(6)
    s = ParamStore()
    init_pek_gcn(s, rng, "p", OPS.K, 3, 4, 2)
    H = rng.normal(size=(OPS.n, 3))
    perm = rng.permutation(OPS.n)
    a = pek_gcn_forward(H, OPS, s, "p").data
    b = pek_gcn_forward(H[perm], OPS.permuted(perm), s, "p").data
    assert np.allclose(b, a[perm], atol=1e-12)


def test_self_attention_time_equivariance_and_weights():
    rng = np.random.default_rng(7)
    s = ParamStore()
    init_self_attention(s, rng, "a", 5, 6)
    X = rng.normal(size=(8, 5))
    out, A = self_attention_forward(X, s, "a", return_weights=True)
    assert np.allclose(A.data.sum(axis=-1), 1.0) and np.all(A.data > 0)
    perm = rng.permutation(8)
    out2 = self_attention_forward(X[perm], s, "a").data
    assert np.allclose(out2, out.data[perm], atol=1e-12)


# ---------------------------------------------------------------- norms


def test_regularized_norm_examples():
    eps = 1e-6
    assert np.isclose(regularized_nuclear_norm(np.diag([3.0, 1.0]), eps), np.log(3 + eps) + np.log(1 + eps))
    assert np.isclose(regularized_nuclear_norm(np.zeros((3, 4)), eps), 3 * np.log(eps))
    assert np.isclose(nuclear_norm(np.diag([3.0, -1.0])), 4.0)


def test_regularized_norm_below_plain_norm():
    """log(s + eps) < s for s > 0, so the log norm never exceeds the nuclear norm."""
    rng = np.random.default_rng(8)
    for _ in range(50):
        A = rng.normal(size=(8, 13)) * rng.uniform(0.01, 10)
        assert regularized_nuclear_norm(A) < nuclear_norm(A)


def test_rank_deficient_gradient_ignores_null_space():
    A = np.outer(np.arange(1.0, 9.0), np.arange(1.0, 14.0))
    t = nc.Tensor(A, requires_grad=True)
    regularized_nuclear_norm(t).backward()
    r = nc.svd(A)
    expect = np.outer(r.U[:, 0], r.V[:, 0]) / (r.S[0] + 1e-6)
    assert np.allclose(t.grad, expect, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        LowRankConfig(eps=0.0)
    with pytest.raises(ValueError):
        LowRankConfig(norm="frobenius")


# ---------------------------------------------------------------- conditioning


def test_normalizer_uses_observed_entries_only():
    x = np.zeros((1, 2, 2, 2))
    x[0, 0, 0] = [1.0, 3.0]
    x[0, 1, 0] = [3.0, 5.0]
    x[0, :, 1] = 1e6
    m = np.array([[[1, 0], [1, 0]]], float)
    n = Normalizer.fit(x, m)
    assert np.allclose(n.mean, [2.0, 4.0]) and np.allclose(n.std, [1.0, 1.0])
    assert np.allclose(n.inverse(n.forward(x)), x)


def test_mean_fill():
    z = np.arange(8.0).reshape(1, 2, 2, 2)
    m = np.array([[[1, 0], [1, 0]]], float)
    out = mean_fill(z, m)
    assert np.array_equal(out[0, :, 0], z[0, :, 0])
    assert np.allclose(out[0, :, 1], z[0, :, 0].mean(axis=0))
    assert np.array_equal(mean_fill(z, np.zeros((1, 2, 2))), np.zeros_like(z))


# ---------------------------------------------------------------- training


def constant_windows(n, T, N, value, missing=0.3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = np.full((T, N, 2), value)
        m = (rng.random((T, N)) >= missing).astype(float)
        out.append(MeasurementWindow(i, x, x * m[:, :, None], m, (1 - m).astype(np.int64)))
    return out


def test_all_ones_input_reconstructs_ones(ops39):
    ws = constant_windows(3, 8, ops39.n, 1.0, missing=0.0)
    model = train_lowrank(ws, ops39, LowRankConfig(epochs=60, warmup_epochs=20, batch_size=3), seed=0)
    L = lowrank_forward(model, np.stack([w.x_obs for w in ws]), np.stack([w.mask for w in ws])).L
    assert np.allclose(L, 1.0, atol=1e-3)
    for c in range(2):
        S = nc.svd(L[..., c]).S
        assert np.all(S[:, 0] ** 2 / (S**2).sum(axis=1) >= 0.99)


def norm_only_history(case39, ops39, seed):
    ws = inject_missing(generate_windows(case39, ModalConfig(), 16, seed), MissingSchedule(random_rate=0.3, seed=1))
    cfg = LowRankConfig(lam_fid=0.0, warmup_epochs=0, epochs=50, batch_size=16)
    model = train_lowrank(ws, ops39, cfg, seed=0)
    return np.array([h["norm"] for h in model.history])


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_norm_only_training_trends_down(case39, ops39, seed):
    norms = norm_only_history(case39, ops39, seed)
    assert len(norms) == 50
    assert norms[-1] < norms[0] - 5.0
    assert norms[25:].mean() < norms[:10].mean()


@pytest.mark.xfail(strict=True, reason="Adam steps are not a descent method on log(sigma + eps): "
                                       "the first step lifts a structurally zero singular value")
def test_norm_only_training_strictly_monotone(case39, ops39):
    norms = norm_only_history(case39, ops39, 1)
    assert np.all(np.diff(norms) < 0)


def test_training_is_deterministic(small_windows, ops39):
    cfg = LowRankConfig(epochs=1, batch_size=32)
    a = train_lowrank(small_windows[:40], ops39, cfg, seed=4)
    b = train_lowrank(small_windows[:40], ops39, cfg, seed=4)
    assert a.store.to_json() == b.store.to_json()
    assert a.history == b.history


def test_training_never_reads_ground_truth(small_windows, ops39):
    """Poisoning x_true leaves training unchanged."""
    cfg = LowRankConfig(epochs=1, batch_size=32)
    poisoned = [replace(w, x_true=np.full_like(w.x_true, np.nan)) for w in small_windows[:40]]
    a = train_lowrank(small_windows[:40], ops39, cfg, seed=4)
    b = train_lowrank(poisoned, ops39, cfg, seed=4)
    assert a.store.to_json() == b.store.to_json()


def test_inference_shapes_and_batch_consistency(small_windows, ops39):
    model = train_lowrank(small_windows[:10], ops39, LowRankConfig(epochs=1), seed=0, max_steps=1)
    x = np.stack([w.x_obs for w in small_windows[:3]])
    m = np.stack([w.mask for w in small_windows[:3]])
    full = lowrank_forward(model, x, m).L
    one = lowrank_forward(model, x[1], m[1]).L
    assert full.shape == x.shape and one.shape == x[1].shape
    assert np.allclose(full[1], one, atol=1e-12)
