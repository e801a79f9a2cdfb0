import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from upiv.moments import (
    InstrumentKind,
    UnpairedDataset,
    cov_hat,
    cross_fold_denominator_analytic,
    cross_fold_denominator_mc,
    cross_moments,
    fold_cross_cov,
    moment_system,
    omega_hat,
    projected_omega,
    split_folds,
)

from oracles import cov_loop, dense_onehot, omega_two_pass, split_average_denominator


def _onehot_ds(rng, m=4, n=40, nt=36, d=2):
    z_y = rng.integers(0, m, n)
    z_x = rng.integers(0, m, nt)
    return UnpairedDataset(z_y, rng.normal(size=n), z_x, rng.normal(size=(nt, d)), "onehot", m)


def _cont_ds(rng, m=3, n=30, nt=25, d=2):
    return UnpairedDataset(rng.normal(size=(n, m)), rng.normal(size=n),
                           rng.normal(size=(nt, m)), rng.normal(size=(nt, d)), "continuous", m)


# -- cov_hat ---------------------------------------------------------------


def test_cov_hat_worked_example():
    u = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.array([1.0, 3.0])
    np.testing.assert_allclose(cov_hat(u, v), [-0.5, 0.5], atol=1e-15)


def test_cov_hat_constant_component_is_zero():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(20, 3))
    np.testing.assert_array_equal(cov_hat(u, np.full(20, 7.0)), np.zeros(3))


def test_cov_hat_needs_two_pairs():
    with pytest.raises(ValueError, match="degenerate sample"):
        cov_hat(np.ones((1, 2)), np.ones(1))


def test_cov_hat_monte_carlo_identity():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(100_000, 1))
    assert abs(cov_hat(z, z)[0, 0] - 1.0) < 0.05


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31))
def test_cov_hat_matches_loop(n, p, q, seed):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(n, p)), rng.normal(size=(n, q))
    np.testing.assert_allclose(cov_hat(u, v), cov_loop(u, v), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_cov_hat_bilinear(seed, a, b):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(15, 2))
    v1, v2 = rng.normal(size=15), rng.normal(size=15)
    np.testing.assert_allclose(cov_hat(u, a * v1 + b * v2),
                               a * cov_hat(u, v1) + b * cov_hat(u, v2), atol=1e-12)


# -- dataset and moment system --------------------------------------------


def test_dataset_validation():
    with pytest.raises(ValueError, match="degenerate"):
        UnpairedDataset([0], [1.0], [0, 1], [[1.0], [2.0]], "onehot", 2)
    with pytest.raises(ValueError):
        UnpairedDataset([0, 3], [1.0, 2.0], [0, 1], [[1.0], [2.0]], "onehot", 2)
    with pytest.raises(ValueError):
        UnpairedDataset(np.ones((3, 2)), np.ones(3), np.ones((3, 3)), np.ones((3, 1)), "continuous", 2)


def test_from_dense_infers_onehot():
    rng = np.random.default_rng(2)
    ds = _onehot_ds(rng)
    back = UnpairedDataset.from_dense(dense_onehot(ds.z_y, 4), ds.y, dense_onehot(ds.z_x, 4), ds.x)
    assert back.kind is InstrumentKind.ONEHOT
    np.testing.assert_array_equal(back.z_x, ds.z_x)


def test_onehot_moments_match_dense():
    rng = np.random.default_rng(3)
    ds = _onehot_ds(rng, m=5)
    ms = moment_system(ds)
    np.testing.assert_allclose(ms.a, cov_loop(dense_onehot(ds.z_y, 5), ds.y)[:, 0], atol=1e-12)
    np.testing.assert_allclose(ms.B, cov_loop(dense_onehot(ds.z_x, 5), ds.x), atol=1e-12)


def test_balanced_onehot_rows_are_scaled_mean_deviations():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m, r, d = rng.integers(2, 8), rng.integers(2, 6), rng.integers(1, 4)
        z = np.repeat(np.arange(m), r)
        x = rng.normal(size=(m * r, d))
        ds = UnpairedDataset(z, rng.normal(size=m * r), z, x, "onehot", m)
        means = np.array([x[z == e].mean(0) for e in range(m)])
        np.testing.assert_allclose(moment_system(ds).B, (means - x.mean(0)) / m, atol=1e-12)


# -- folds -----------------------------------------------------------------


def test_fold_cross_cov_worked_example():
    out = fold_cross_cov(np.array([0, 1]), np.array([[0.0], [2.0]]), "onehot", 2)
    np.testing.assert_allclose(out, [[-0.5], [0.5]], atol=1e-15)


def test_fold_cross_cov_single_environment_constant_rows():
    out = fold_cross_cov(np.array([1, 1, 1]), np.ones((3, 2)) * 4.0, "onehot", 3)
    np.testing.assert_array_equal(out, np.zeros((3, 2)))


def test_fold_cross_cov_empty_environment_row_is_zero():
    out = fold_cross_cov(np.array([0, 0, 2]), np.array([[1.0], [2.0], [6.0]]), "onehot", 3)
    assert out[1, 0] == 0.0


def test_fold_cross_cov_continuous_equals_cov_hat():
    rng = np.random.default_rng(5)
    z, x = rng.normal(size=(12, 3)), rng.normal(size=(12, 2))
    np.testing.assert_allclose(fold_cross_cov(z, x, "continuous", 3), cov_hat(z, x), atol=1e-14)


def test_fold_cross_cov_global_centers_average_to_full_cov():
    rng = np.random.default_rng(6)
    ds = _cont_ds(rng, nt=24)
    centers = (ds.z_x.mean(0), ds.x.mean(0))
    halves = [fold_cross_cov(ds.z_x[s], ds.x[s], "continuous", 3, centers)
              for s in (slice(0, 12), slice(12, 24))]
    np.testing.assert_allclose(0.5 * sum(halves), cov_hat(ds.z_x, ds.x), atol=1e-14)


def test_split_folds_stratified_balance():
    rng = np.random.default_rng(7)
    z = np.repeat(np.arange(5), 6)
    fold = split_folds(z, "onehot", 2, rng)
    for e in range(5):
        assert np.sum(fold[z == e] == 0) == 3


def test_split_folds_too_few():
    with pytest.raises(ValueError, match="too few observations for K folds"):
        split_folds(np.arange(2), "onehot", 3, np.random.default_rng(0))


def test_mc_denominator_identical_folds():
    # two identical halves: B_1 = B_2 = B, so C_XX = m B^T B
    z = np.array([0, 1, 2, 0, 1, 2])
    x = np.array([[1.0], [3.0], [-2.0], [1.0], [3.0], [-2.0]])
    ds = UnpairedDataset(z, np.arange(6.0), z, x, "onehot", 3)
    B = fold_cross_cov(z[:3], x[:3], "onehot", 3)
    out = cross_fold_denominator_mc(ds, K=2, H=1, rng=0)
    np.testing.assert_allclose(out, 3 * B.T @ B, atol=1e-12)


def test_mc_denominator_deterministic_given_seed():
    rng = np.random.default_rng(8)
    ds = _onehot_ds(rng, n=60, nt=60)
    a = cross_fold_denominator_mc(ds, K=3, H=4, rng=11)
    b = cross_fold_denominator_mc(ds, K=3, H=4, rng=11)
    assert a.tobytes() == b.tobytes()


def test_mc_denominator_errors():
    rng = np.random.default_rng(9)
    ds = _onehot_ds(rng, n=4, nt=3)
    with pytest.raises(ValueError, match="too few observations"):
        cross_fold_denominator_mc(ds, K=4, H=1)


# -- analytic denominator --------------------------------------------------


@pytest.mark.parametrize("n", [4, 6, 8])
def test_analytic_equals_exhaustive_split_average(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        I = rng.normal(size=(n, 3))
        X = rng.normal(size=(n, 2))
        ds = UnpairedDataset(I, rng.normal(size=n), I, X, "continuous", 3)
        np.testing.assert_allclose(cross_fold_denominator_analytic(ds),
                                   split_average_denominator(I, X), atol=1e-12)


def test_analytic_onehot_m2_n4():
    z = np.array([0, 1, 0, 1])
    x = np.array([[0.3], [1.7], [-0.4], [2.2]])
    ds = UnpairedDataset(z, np.zeros(4), z, x, "onehot", 2)
    np.testing.assert_allclose(cross_fold_denominator_analytic(ds),
                               split_average_denominator(dense_onehot(z, 2), x), atol=1e-12)


def test_analytic_identical_summands():
    # g_j identical for all j gives m g^T g; realised with a centred rank-one design
    I = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    X = np.array([[2.0], [-2.0], [2.0], [-2.0]])
    ds = UnpairedDataset(I, np.zeros(4), I, X, "continuous", 1)
    g = np.outer(I[0], X[0])
    np.testing.assert_allclose(cross_fold_denominator_analytic(ds), 1 * g.T @ g, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_analytic_symmetric(seed):
    rng = np.random.default_rng(seed)
    ds = _onehot_ds(rng, m=6, nt=30, d=3)
    for strat in (False, True):
        out = cross_fold_denominator_analytic(ds, stratify=strat)
        assert np.abs(out - out.T).max() <= 1e-10


def test_stratified_analytic_is_limit_of_stratified_mc():
    rng = np.random.default_rng(10)
    m, r = 6, 4
    z = np.repeat(np.arange(m), r)
    ds = UnpairedDataset(z, rng.normal(size=m * r), z, rng.normal(size=(m * r, 2)), "onehot", m)
    H = 1000
    draws = np.array([cross_fold_denominator_mc(ds, 2, 1, rng) for _ in range(H)])
    target = cross_fold_denominator_analytic(ds, stratify=True)
    se = draws.std(0, ddof=1) / np.sqrt(H)
    assert np.all(np.abs(draws.mean(0) - target) <= 3 * se + 1e-12)


def test_uniform_analytic_is_limit_of_unstratified_mc():
    rng = np.random.default_rng(11)
    ds = _cont_ds(rng, nt=20)
    H = 1000
    draws = np.array([cross_fold_denominator_mc(ds, 2, 1, rng) for _ in range(H)])
    target = cross_fold_denominator_analytic(ds)
    se = draws.std(0, ddof=1) / np.sqrt(H)
    assert np.all(np.abs(draws.mean(0) - target) <= 3 * se + 1e-12)


def test_cross_moments_carries_factor_m():
    rng = np.random.default_rng(12)
    ds = _onehot_ds(rng)
    ms = moment_system(ds)
    cm = cross_moments(ds)
    np.testing.assert_allclose(cm.c_xy, ds.m * ms.B.T @ ms.a)
    assert cm.construction == "analytic" and cm.m_scale == ds.m


# -- omega_hat -------------------------------------------------------------


def test_omega_zero_when_no_variation():
    rng = np.random.default_rng(13)
    ds = UnpairedDataset(rng.integers(0, 3, 10), np.zeros(10), rng.integers(0, 3, 10),
                         rng.normal(size=(10, 2)), "onehot", 3)
    np.testing.assert_array_equal(omega_hat(ds, np.zeros(2)).omega, np.zeros((3, 3)))


def test_omega_balanced_shares():
    rng = np.random.default_rng(14)
    ds = _cont_ds(rng, n=20, nt=20)
    mv = omega_hat(ds, np.array([0.5, -1.0]))
    assert mv.tau_n == mv.tilde_tau_n == 0.5
    np.testing.assert_allclose(mv.omega, 2 * (mv.parts["omega_m"] + mv.parts["omega_c"]))


@pytest.mark.parametrize("kind", ["onehot", "continuous"])
def test_omega_matches_two_pass_oracle(kind):
    rng = np.random.default_rng(15)
    ds = _onehot_ds(rng, m=3) if kind == "onehot" else _cont_ds(rng, m=3)
    beta0 = rng.normal(size=ds.d)
    expect = omega_two_pass(ds.dense_instruments("y"), ds.y, ds.dense_instruments("x"), ds.x, beta0)
    mv = omega_hat(ds, beta0)
    np.testing.assert_allclose(mv.omega, expect, atol=1e-12)
    assert abs(mv.tau_n + mv.tilde_tau_n - 1) < 1e-15


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_omega_psd(seed):
    rng = np.random.default_rng(seed)
    ds = _onehot_ds(rng, m=5)
    assert np.linalg.eigvalsh(omega_hat(ds, rng.normal(size=ds.d)).omega).min() >= -1e-10


def test_omega_rejects_bad_beta():
    rng = np.random.default_rng(16)
    with pytest.raises(ValueError):
        omega_hat(_onehot_ds(rng), np.array([np.nan, 1.0]))


def test_projected_omega_matches_full():
    rng = np.random.default_rng(17)
    for ds in (_onehot_ds(rng, m=5), _cont_ds(rng, m=4)):
        P = rng.normal(size=(ds.m, 2))
        beta0 = rng.normal(size=ds.d)
        np.testing.assert_allclose(projected_omega(ds, beta0, P),
                                   P.T @ omega_hat(ds, beta0).omega @ P, atol=1e-12)
