import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from upiv.datagen import GeneratorSpec, gen_categorical
from upiv.identifiability import (
    FirstStage,
    PopulationQB,
    dense_identifiable,
    numerical_rank,
    population_q_b,
    restricted_nullspace_holds,
    solution_set_is,
    sparsest_solution_set,
    tsiv_bias_predict,
    tsiv_plateau,
)

from oracles import enumeration_verdict, random_first_stage


def _dup():
    c = np.random.default_rng(0).normal(size=(3, 4))
    c[:, 1] = c[:, 0]
    return c


# ---------------------------------------------------------------------------
# dense rank


def test_dense_identity():
    assert dense_identifiable(np.eye(3))


def test_dense_duplicated_column():
    assert not dense_identifiable(_dup())


def test_dense_fewer_instruments_than_covariates():
    assert not dense_identifiable(np.random.default_rng(1).normal(size=(3, 5)))


def test_numerical_rank_zero_matrix():
    assert numerical_rank(np.zeros((3, 2))) == 0


# ---------------------------------------------------------------------------
# restricted nullspace


@pytest.mark.parametrize("s_star", [0, 1, 2, 3])
def test_rnp_identity(s_star):
    assert restricted_nullspace_holds(np.eye(6), s_star)


def test_rnp_duplicated_column_fails():
    c = _dup()
    v = np.array([1.0, -1.0, 0, 0])
    np.testing.assert_allclose(c @ v, 0, atol=1e-14)
    assert not restricted_nullspace_holds(c, 1)


def test_rnp_generic_two_rows_s1():
    rng = np.random.default_rng(2)
    assert all(restricted_nullspace_holds(rng.normal(size=(2, 4)), 1) for _ in range(100))


def test_rnp_budget():
    with pytest.raises(ValueError, match="enumeration budget exceeded"):
        restricted_nullspace_holds(np.eye(21), 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_rnp_monotone_in_sparsity(seed):
    c, s_star = random_first_stage(np.random.default_rng(seed), d_max=7, s_max=3)
    if restricted_nullspace_holds(c, s_star):
        assert all(restricted_nullspace_holds(c, s) for s in range(s_star + 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31))
def test_rnp_needs_2s_instruments(s_star, seed):
    rng = np.random.default_rng(seed)
    d = 2 * s_star + int(rng.integers(0, 3))
    m = int(rng.integers(1, 2 * s_star))
    assert not restricted_nullspace_holds(rng.normal(size=(m, d)), s_star)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_rnp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    c, s_star = random_first_stage(rng)
    assert restricted_nullspace_holds(c, s_star) == enumeration_verdict(sparsest_solution_set, c, s_star, rng)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_rnp_gram_form_agrees(seed):
    rng = np.random.default_rng(seed)
    c, s_star = random_first_stage(rng)
    m = c.shape[0]
    q = m * c.T @ c
    assert restricted_nullspace_holds(q, s_star, gram=True) == restricted_nullspace_holds(c, s_star)


# ---------------------------------------------------------------------------
# sparsest solutions


def test_sparsest_identity():
    beta = np.array([0, 0, 1.5, 0])
    sols = sparsest_solution_set(np.eye(4), beta, 1)
    assert solution_set_is(sols, beta)


def test_sparsest_duplicated_columns():
    c = _dup()
    e1 = np.eye(4)[0]
    sols = sparsest_solution_set(c, c @ e1, 1)
    assert len(sols) >= 2
    assert any(np.allclose(s, e1) for s in sols)
    assert any(np.allclose(s, np.eye(4)[1]) for s in sols)


def test_sparsest_zero_target():
    sols = sparsest_solution_set(np.random.default_rng(3).normal(size=(3, 5)), np.zeros(3), 2)
    assert len(sols) == 1 and np.all(sols[0] == 0)


def test_sparsest_budget():
    with pytest.raises(ValueError, match="enumeration budget exceeded"):
        sparsest_solution_set(np.eye(13), np.ones(13), 1)


def test_sparsest_none_within_budget():
    assert sparsest_solution_set(np.eye(3), np.ones(3), 2) == []


# ---------------------------------------------------------------------------
# population Q, b and the plug-in limit


def _truth(mu, sx, gamma_x=0.2, sigma_u=0.2):
    class T:
        pass
    t = T()
    t.mu = np.asarray(mu, float)
    t.sigma_x_env = np.asarray(sx, float)
    spec = GeneratorSpec(kind="categorical", setting="S2", m=len(mu), d=1, s_star=1,
                         beta_rule="dense", gamma_x=gamma_x, sigma_u=sigma_u)
    return t, spec


def test_q_zero_when_means_equal():
    t, spec = _truth(np.full((5, 1), 0.7), np.ones(5))
    assert population_q_b(t, spec).q_scalar == 0.0


def test_q_two_environments():
    t, spec = _truth([[-1.0], [1.0]], np.zeros(2), gamma_x=0.0)
    qb = population_q_b(t, spec)
    assert qb.q_scalar == pytest.approx(1.0)
    # noiseless covariates leave no measurement error in the environment means
    assert qb.b == 0.0


def test_q_scales_quadratically():
    rng = np.random.default_rng(4)
    mu = rng.normal(size=(6, 2))
    t1, spec = _truth(mu, np.ones(6))
    t2, _ = _truth(mu.mean(0) + 2 * (mu - mu.mean(0)), np.ones(6))
    np.testing.assert_allclose(population_q_b(t2, spec).q, 4 * population_q_b(t1, spec).q)


def test_b_matches_monte_carlo():
    # E[m B^T B] = Q + b / r~ for the balanced one-hot design, checked on 10^6 draws
    rng = np.random.default_rng(5)
    m, r_t, reps = 4, 5, 50_000
    mu = np.array([-1.0, 0.3, 0.5, 1.2])
    sx = np.array([0.5, 1.0, 1.5, 0.8])
    gx, su = 0.7, 0.6
    t, spec = _truth(mu[:, None], sx, gamma_x=gx, sigma_u=su)
    x = (mu[None, :, None] + gx * rng.normal(0, su, (reps, m, r_t))
         + sx[None, :, None] * rng.standard_normal((reps, m, r_t)))
    assert x.size == 10 ** 6
    xbar_e = x.mean(2)
    rows = (xbar_e - xbar_e.mean(1, keepdims=True)) / m
    mc = (m * (rows ** 2).sum(1)).mean()
    se = (m * (rows ** 2).sum(1)).std() / np.sqrt(reps)
    qb = population_q_b(t, spec)
    assert abs(mc - (qb.q_scalar + qb.b / r_t)) < 4 * se


def test_iid_design_adds_count_variance():
    t, spec = _truth([[-1.0], [1.0], [0.0]], np.ones(3))
    bal, iid = population_q_b(t, spec), population_q_b(t, spec, "iid")
    np.testing.assert_allclose(iid.b_matrix - bal.b_matrix, (1 - 2 / 3) * bal.q)
    with pytest.raises(ValueError):
        population_q_b(t, spec, "other")


def test_population_q_b_rejects_continuous():
    spec = GeneratorSpec(kind="continuous", setting="S2", m=3, d=1, s_star=1, beta_rule="dense")
    with pytest.raises(ValueError):
        population_q_b(None, spec)


def test_population_q_b_from_generator():
    spec = GeneratorSpec(kind="categorical", setting="S2", m=50, d=2, s_star=2, beta_rule="dense",
                         seed=0)
    _, truth = gen_categorical(spec)
    qb = population_q_b(truth, spec)
    assert isinstance(qb, PopulationQB)
    assert qb.q.shape == (2, 2)
    assert np.all(np.linalg.eigvalsh(qb.q) >= 0)


def test_bias_predict_examples():
    assert tsiv_bias_predict(1.7, 2.0, 0.0, 3.0) == 1.7
    assert abs(tsiv_bias_predict(1.0, 1.0, 1.0, 1e9) - 1.0) < 1e-6
    assert tsiv_bias_predict(2.0, 1.0, 1.0, 1.0) == pytest.approx(1.0)


def test_plateau_reduces_to_scalar_formula():
    pl = tsiv_plateau(np.array([2.0]), np.array([[1.5]]), np.array([[0.6]]), 4.0)
    assert pl[0] == pytest.approx(tsiv_bias_predict(2.0, 1.5, 0.6, 4.0))


def test_first_stage_validation():
    FirstStage(np.eye(2), 1, q=np.eye(2))
    with pytest.raises(ValueError):
        FirstStage(np.eye(2), 3)
    with pytest.raises(ValueError):
        FirstStage(np.eye(2), 1, q=np.array([[1.0, 2.0], [0.0, 1.0]]))
