import numpy as np
import pytest
from hypothesis import given, strategies as st

from aqkit.fisher import fisher_diagonal, importance_weights
from aqkit.quantcore import QuantType, dequantize, quant_mse, quantize_rtn, rtn_params
from aqkit.scaleopt import (ScaleOptConfig, assign_codes, objective, optimal_scale,
                            optimize_block, optimize_tensor)

Q2 = QuantType(2, block_size=4, superblock_size=0)


def test_assign_codes_on_codebook():
    qt = QuantType(3, block_size=8, superblock_size=0)
    cb = qt.codebook_values().astype(float)
    assert np.array_equal(assign_codes(0.37 * cb, 0.37, qt), cb)


def test_assign_codes_scaling_relation(rng):
    qt = QuantType(4)
    w = rng.normal(size=32)
    assert np.array_equal(assign_codes(w, 0.2, qt), assign_codes(w / 2, 0.1, qt))


def test_assign_codes_hand_example():
    assert assign_codes([0.9, -1.6, 0.2, 0.45], 1.0, Q2).tolist() == [1, -2, 0, 0]


def test_assign_codes_zero_scale():
    assert np.all(assign_codes([1.0, -2.0], 0.0, Q2) == 0)


def test_optimal_scale_examples(rng):
    w, q = rng.normal(size=8), rng.integers(-4, 4, size=8).astype(float)
    assert optimal_scale(w, q, np.ones(8)) == pytest.approx(np.dot(w, q) / np.dot(q, q), rel=1e-14)
    q = np.array([1.0, -2.0, 3.0])
    assert optimal_scale(0.7 * q, q, [0.5, 2.0, 1.0]) == pytest.approx(0.7, rel=1e-14)
    assert optimal_scale([1.0, 2.0], [1.0, 2.0], [1.0, 3.0]) == 1.0


def test_optimal_scale_degenerate_keeps_previous():
    assert optimal_scale([1.0, 2.0], [0, 0], [1, 1], previous=0.3) == 0.3
    assert optimal_scale([1.0, 2.0], [1, 2], [0, 0], previous=0.3) == 0.3


def test_block_on_codebook_converges_immediately():
    qt = QuantType(3, block_size=8, superblock_size=0)
    w = -0.25 * qt.codebook_values().astype(float)
    r = optimize_block(w, np.ones(8), qt)
    assert r.trace[-1] == 0.0
    assert r.iterations <= 1 and r.converged


def test_zero_block_degenerate_success():
    r = optimize_block(np.zeros(4), np.ones(4), Q2)
    assert r.scale == 0 and r.trace == [0.0] and r.converged


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        optimize_block([1.0, np.nan], [1, 1], Q2)
    with pytest.raises(ValueError):
        optimize_block([1.0, 2.0], [1, -1], Q2)
    with pytest.raises(ValueError):
        ScaleOptConfig(max_iters=0)
    with pytest.raises(ValueError):
        ScaleOptConfig(rel_tol=0)
    with pytest.raises(ValueError):
        ScaleOptConfig(importance_mode="hessian")


@pytest.mark.parametrize("bits", [2, 3, 4])
def test_uniform_importance_never_worse_than_rtn(bits, rng):
    qt = QuantType(bits, block_size=32, superblock_size=0)
    for _ in range(200):
        w = rng.normal(size=32)
        s0, z0 = rtn_params(w[None, :], qt)
        rtn_phi = objective(w, np.ones(32), s0[0], assign_codes(w, s0[0], qt))
        r = optimize_block(w, np.ones(32), qt)
        assert r.trace[-1] <= rtn_phi


def test_importance_protects_heavy_element():
    w = np.array([0.1, -0.3, 0.25, 0.4])
    heavy = optimize_block(w, np.array([10.0, 1, 1, 1]), Q2)
    flat = optimize_block(w, np.ones(4), Q2)
    err = lambda r: (w[0] - r.scale * r.codes[0]) ** 2
    assert err(heavy) <= err(flat)


@pytest.mark.parametrize("bits", [2, 3, 4])
def test_descent_convergence_and_local_optimality(bits):
    rng = np.random.default_rng(100 + bits)
    qt = QuantType(bits)
    converged = 0
    for _ in range(1000):
        w = rng.normal(size=32)
        om = rng.uniform(0, 2, size=32)
        r = optimize_block(w, om, qt, cfg=ScaleOptConfig(max_iters=20, rel_tol=1e-8))
        assert all(b <= a for a, b in zip(r.trace, r.trace[1:]))
        converged += r.converged
        phi = objective(w, om, r.scale, r.codes)
        for f in (0.99, 1.01):
            assert objective(w, om, r.scale * f, r.codes) >= phi
    assert converged >= 990


@pytest.mark.parametrize("codebook", ["symmetric", "asymmetric"])
def test_descent_asymmetric_and_symmetric(codebook, rng):
    qt = QuantType(3, codebook, 16, 0)
    for _ in range(200):
        w = rng.normal(size=16) + rng.normal()
        r = optimize_block(w, rng.uniform(0, 1, 16), qt)
        assert all(b <= a for a, b in zip(r.trace, r.trace[1:]))


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 8))
def test_zero_importance_neutrality(seed, n_dead):
    rng = np.random.default_rng(seed)
    qt = QuantType(3, block_size=16, superblock_size=0)
    w = rng.normal(size=16)
    om = rng.uniform(0.1, 1.0, size=16)
    dead = rng.choice(16, n_dead, replace=False)
    om[dead] = 0.0
    # pin the start so that only the optimizer's own updates could see the dead elements
    s0 = float(np.abs(w).max() / 4)
    r1 = optimize_block(w, om, qt, init_scale=s0)
    w2 = w.copy()
    w2[dead] = rng.normal(size=n_dead) * 5
    r2 = optimize_block(w2, om, qt, init_scale=s0)
    live = np.setdiff1d(np.arange(16), dead)
    assert r1.scale == r2.scale
    assert np.array_equal(r1.codes[live], r2.codes[live])


def test_block_independence(rng):
    qt = QuantType(3)
    w = rng.normal(size=(8, 32))
    f = rng.uniform(0, 1, size=w.size)
    a = optimize_tensor(w, f, qt)
    perm = rng.permutation(8)
    b = optimize_tensor(w[perm], f.reshape(8, 32)[perm].ravel(), qt)
    assert np.array_equal(a.codes[perm], b.codes)
    assert np.array_equal(a.scales[perm], b.scales)


def test_tensor_single_iteration_not_worse_than_rtn(rng):
    for bits in (2, 3, 4):
        qt = QuantType(bits)
        w = rng.normal(size=(16, 32))
        q = optimize_tensor(w, None, qt, ScaleOptConfig(max_iters=1, importance_mode="uniform"))
        assert quant_mse(w, q) <= quant_mse(w, quantize_rtn(w, qt))


def test_zero_fisher_falls_back_to_magnitude(rng):
    qt = QuantType(3)
    w = rng.normal(size=(4, 32))
    a = optimize_tensor(w, np.zeros(w.size), qt)
    b = optimize_tensor(w, None, qt, ScaleOptConfig(importance_mode="magnitude"))
    assert "zero-fisher" in a.flags["notes"]
    assert np.array_equal(dequantize(a), dequantize(b))


def test_alignment_error(rng):
    with pytest.raises(ValueError):
        optimize_tensor(rng.normal(size=(2, 32)), np.ones(10), QuantType(3))
    with pytest.raises(ValueError):
        optimize_tensor(rng.normal(size=(2, 32)), None, QuantType(3))


def test_fisher_beats_magnitude_on_policy_tensors(policy_for_seed, task):
    """Paired comparison at 3 bits on every backbone tensor of 5 trained policies."""
    from aqkit.harness.pipeline import gen_calibration
    qt = QuantType(3)
    for seed in range(5):
        pol = policy_for_seed(seed)
        cal = gen_calibration(pol, task, 60, 42 + seed)
        fish = fisher_diagonal(cal.gradient_samples(), 1.0)
        fw = mw = 0.0
        for n in pol.quantizable:
            w = pol.params[n]
            om = importance_weights(fish[n], w, qt.block_size).ravel()[:w.size].reshape(w.shape)
            fq = optimize_tensor(w, fish[n], qt)
            mq = optimize_tensor(w, None, qt, ScaleOptConfig(importance_mode="magnitude"))
            fw += quant_mse(w, fq, om)
            mw += quant_mse(w, mq, om)
        print(f"seed {seed}: fisher {fw:.4e} magnitude {mw:.4e}")
        assert fw < mw
