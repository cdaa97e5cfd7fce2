import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aqkit.calibration import (CalibrationFormatError, CalibrationSet, TensorInfo, from_bytes,
                               load_calibration, save_calibration)
from aqkit.hsic import KernelSpec, hsic_estimate
from aqkit.sensitivity import (MissingActivationsError, SensitivityConfig, build_table,
                               hsic_terms, shared_bandwidth_config, standardize_terms,
                               tensor_sensitivity)

RAW = SensitivityConfig(standardize=False)


def synthetic(rng, K=30, n_layers=2, with_grads=False):
    X = rng.normal(size=(K, 3))
    Y = np.tanh(X[:, :2] @ rng.normal(size=(2, 2)))
    tensors, Z, ga, gc = [], {}, {}, {}
    for l in range(1, n_layers + 1):
        for m in ("up", "down"):
            name = f"{l}.{m}"
            tensors.append(TensorInfo(name, l, m, (4, 5)))
            Z[name] = np.tanh(X @ rng.normal(size=(3, 6))) + 0.3 * rng.normal(size=(K, 6))
            ga[name] = rng.normal(size=(K, 20))
            gc[name] = rng.normal(size=(K, 20))
    if not with_grads:
        ga, gc = {}, {}
    return CalibrationSet(X, Y, Z, tensors, ga, gc, {"seed": 0})


def test_constant_output_scores_zero(rng):
    c = synthetic(rng)
    c.Z["1.up"] = np.ones((c.K, 6))
    assert tensor_sensitivity(c, "1.up", RAW) == 0.0
    assert "degenerate" in build_table(c).entries[0].flags


def test_self_dependence_is_maximal(rng):
    c = synthetic(rng)
    cfg = SensitivityConfig(0.0, 1.0, False)
    c.Z["1.up"] = c.Y.copy()
    c.Z["1.down"] = c.Y[rng.permutation(c.K)]       # same kernel spectrum, scrambled
    s = tensor_sensitivity(c, "1.up", cfg)
    assert s == pytest.approx(hsic_estimate(c.Y, c.Y), rel=1e-12)
    assert s > 0
    assert s >= tensor_sensitivity(c, "1.down", cfg)


def test_single_tensor_standardized_score(rng):
    c = synthetic(rng, n_layers=1)
    c.tensors = c.tensors[:1]
    c.Z = {"1.up": c.Z["1.up"]}
    for a, b in ((1.0, 1.0), (0.5, 2.0)):
        assert tensor_sensitivity(c, "1.up", SensitivityConfig(a, b)) == pytest.approx(b - a, abs=1e-12)


def test_duplicate_activations_score_identically(rng):
    c = synthetic(rng)
    c.Z["2.down"] = c.Z["1.up"].copy()
    t = build_table(c)
    assert t["2.down"].score == t["1.up"].score


def test_table_matches_per_tensor_calls(calib):
    cfg = SensitivityConfig()
    t = build_table(calib, cfg)
    assert len(t) == 6
    assert [e.layer for e in t.entries] == [1, 1, 2, 2, 3, 3]
    for e in t.entries:
        assert e.score == tensor_sensitivity(calib, e.name, cfg)


def test_missing_activations_named(rng):
    c = synthetic(rng)
    del c.Z["2.up"]
    with pytest.raises(MissingActivationsError, match="2.up"):
        build_table(c)
    with pytest.raises(MissingActivationsError):
        tensor_sensitivity(c, "9.up")


def test_config_validation():
    with pytest.raises(ValueError):
        SensitivityConfig(-1.0, 1.0)
    with pytest.raises(ValueError):
        SensitivityConfig(0.0, 0.0)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 3.0), st.floats(0.01, 3.0))
def test_monotone_in_beta(seed, alpha, dbeta):
    c = synthetic(np.random.default_rng(seed), K=12)
    lo = build_table(c, SensitivityConfig(alpha, 1.0))
    hi = build_table(c, SensitivityConfig(alpha, 1.0 + dbeta))
    for e in lo.entries:
        assert hi[e.name].score >= e.score


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10.0))
def test_joint_scaling_preserves_ranking(seed, c_):
    c = synthetic(np.random.default_rng(seed), K=12)
    a = build_table(c, SensitivityConfig(0.7, 1.3))
    b = build_table(c, SensitivityConfig(0.7 * c_, 1.3 * c_))
    sa = np.array([e.score for e in a.entries])
    sb = np.array([e.score for e in b.entries])
    np.testing.assert_allclose(sb, c_ * sa, rtol=1e-12, atol=1e-15)
    assert np.array_equal(np.argsort(sa, kind="stable"), np.argsort(sb, kind="stable"))


@given(st.lists(st.floats(0.0, 1e3), min_size=1, max_size=10))
def test_standardization_idempotent(vals):
    once = standardize_terms(vals)
    np.testing.assert_allclose(standardize_terms(once), once, rtol=1e-12)


def test_planted_redundancy_with_shared_bandwidth(rng):
    c = synthetic(rng, K=40)
    c.X = rng.normal(size=(c.K, 6))
    c.Z["2.up"] = c.X.copy()
    terms = hsic_terms(c, shared_bandwidth_config(0.2))
    red = {n: t[0] for n, t in terms.items()}
    assert max(red, key=red.get) == "2.up"


def test_planted_relevance_on_policy(policy_for_seed, task):
    """The last layer's output outranks an independent Gaussian stand-in."""
    from aqkit.harness.pipeline import gen_calibration
    for seed in range(5):
        pol = policy_for_seed(seed)
        c = gen_calibration(pol, task, 60, 42 + seed)
        noise_rng = np.random.default_rng(seed)
        c.Z["1.up"] = noise_rng.normal(size=c.Z["1.up"].shape)
        t = build_table(c)
        assert t["3.down"].score > t["1.up"].score


# calibration file format

def test_round_trip_identical_bytes(tmp_path, rng):
    c = synthetic(rng, with_grads=True)
    p = tmp_path / "c.aqcb"
    save_calibration(c, p)
    again = load_calibration(p)
    p2 = tmp_path / "d.aqcb"
    save_calibration(again, p2)
    assert p.read_bytes() == p2.read_bytes()
    assert again.K == c.K and [t.name for t in again.tensors] == [t.name for t in c.tensors]


def test_harness_file_has_k60_and_six_tensors(calib, tmp_path):
    p = tmp_path / "calib.aqcb"
    save_calibration(calib, p)
    c = load_calibration(p)
    assert c.K == 60
    assert sorted(c.Z) == sorted(["1.up", "1.down", "2.up", "2.down", "3.up", "3.down"])
    assert len(c.g_act) == 6 and len(c.g_cls) == 6
    assert c.to_bytes() == calib.to_bytes()


def test_mismatched_k_names_both_fields(rng):
    c = synthetic(rng)
    c.Y = c.Y[:-1]
    with pytest.raises(CalibrationFormatError, match=r"X.*Y"):
        c.to_bytes()


def test_rejects_non_finite_and_bad_files(rng):
    c = synthetic(rng)
    buf = c.to_bytes()
    with pytest.raises(CalibrationFormatError):
        from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(CalibrationFormatError):
        from_bytes(buf[:4] + bytes([99]) + buf[5:])
    with pytest.raises(CalibrationFormatError):
        from_bytes(buf[:-3])
    c.X[0, 0] = np.inf
    with pytest.raises(CalibrationFormatError):
        c.to_bytes()


def test_truncation_fuzz_never_crashes(rng):
    buf = synthetic(rng, K=5, with_grads=True).to_bytes()
    for cut in range(0, len(buf), 7):
        with pytest.raises(CalibrationFormatError):
            from_bytes(buf[:cut])
