"""Finite identifiability checks and the plug-in bias predictor.

The sparse checks enumerate supports exhaustively and refuse inputs above
a fixed dimension budget instead of approximating.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

RNS_MAX_D = 20
ENUM_MAX_D = 12


@dataclass(frozen=True)
class FirstStage:
    """First-stage cross-covariance ``c`` (``m x d``) with optional limits ``q`` and ``b``."""

    c: np.ndarray
    s_star: int
    q: np.ndarray | None = None
    b: float | None = None

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        object.__setattr__(self, "c", c)
        if not 0 <= self.s_star <= c.shape[1]:
            raise ValueError("s_star must lie in [0, d]")
        if self.q is not None:
            q = np.asarray(self.q, dtype=float)
            if q.shape != (c.shape[1], c.shape[1]) or not np.allclose(q, q.T):
                raise ValueError("q must be a symmetric d x d matrix")
            object.__setattr__(self, "q", q)


def numerical_rank(c, tol: float = 1e-10) -> int:
    c = np.atleast_2d(np.asarray(c, dtype=float))
    if c.size == 0:
        return 0
    sv = np.linalg.svd(c, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > tol * sv[0]))


def dense_identifiable(c, tol: float = 1e-10) -> bool:
    """Full column rank of the first-stage cross-covariance."""
    c = np.atleast_2d(np.asarray(c, dtype=float))
    return numerical_rank(c, tol) == c.shape[1]


def _batched_full_rank(mats: np.ndarray, tol: float, scale: float) -> np.ndarray:
    sv = np.linalg.svd(mats, compute_uv=False)
    return sv[:, -1] > tol * scale


def restricted_nullspace_holds(c, s_star: int, gram: bool = False, tol: float = 1e-10,
                               chunk: int = 4096) -> bool:
    """No nonzero ``2 s_star``-sparse vector lies in the kernel.

    Checks that every column subset of size ``min(2 s_star, d)`` of ``c``
    has full column rank. With ``gram=True``, ``c`` is the ``d x d`` matrix
    ``q`` and principal submatrices ``q[T, T]`` are checked instead. The
    tolerance is relative to the largest singular value of the whole matrix.
    """
    c = np.atleast_2d(np.asarray(c, dtype=float))
    d = c.shape[1]
    if gram and c.shape[0] != d:
        raise ValueError("gram matrix must be square")
    if d > RNS_MAX_D:
        raise ValueError("enumeration budget exceeded")
    if s_star < 0:
        raise ValueError("s_star must be >= 0")
    size = min(2 * s_star, d)
    if size == 0:
        return True
    if not gram and c.shape[0] < size:
        return False
    scale = float(np.linalg.norm(c, 2))
    if scale == 0:
        return False
    supports = combinations(range(d), size)
    total = comb(d, size)
    done = 0
    while done < total:
        batch = np.array([s for _, s in zip(range(chunk), supports)])
        done += len(batch)
        if gram:
            mats = c[batch[:, :, None], batch[:, None, :]]
        else:
            mats = np.transpose(c[:, batch], (1, 0, 2))
        if not np.all(_batched_full_rank(mats, tol, scale)):
            return False
    return True


def sparsest_solution_set(c, target, s_star: int, tol: float = 1e-8) -> list[np.ndarray]:
    """All exact solutions of ``c beta = target`` with the smallest support of size ``<= s_star``.

    A support counts as exact when the least-squares residual is below
    ``tol * max(1, ||target||)``. Returns an empty list if no solution with at
    most ``s_star`` nonzeros exists.
    """
    c = np.atleast_2d(np.asarray(c, dtype=float))
    target = np.asarray(target, dtype=float).reshape(-1)
    m, d = c.shape
    if d > ENUM_MAX_D:
        raise ValueError("enumeration budget exceeded")
    if len(target) != m:
        raise ValueError("target length must equal the number of rows of c")
    thresh = tol * max(1.0, float(np.linalg.norm(target)))
    if np.linalg.norm(target) <= thresh:
        return [np.zeros(d)]
    for size in range(1, min(s_star, d) + 1):
        found = []
        for T in combinations(range(d), size):
            cT = c[:, T]
            coef, *_ = np.linalg.lstsq(cT, target, rcond=None)
            if np.linalg.norm(cT @ coef - target) > thresh:
                continue
            if np.any(np.abs(coef) <= tol):
                continue  # a smaller support solves it; already ruled out
            beta = np.zeros(d)
            beta[list(T)] = coef
            found.append(beta)
        if found:
            return found
    return []


def solution_set_is(solutions: list[np.ndarray], beta, tol: float = 1e-6) -> bool:
    """Whether ``solutions`` is exactly ``{beta}``."""
    beta = np.asarray(beta, dtype=float)
    return len(solutions) == 1 and np.allclose(solutions[0], beta, atol=tol, rtol=0)


# ---------------------------------------------------------------------------
# population quantities for the categorical generator


@dataclass(frozen=True)
class PopulationQB:
    """``q = m Cov(I,X)^T Cov(I,X)`` and the noise matrix whose trace is ``b``.

    ``b_matrix`` is the expected ``sum_e r~ Cov(bar-noise_e)`` part of
    ``m B^T B``, so that ``E[m B^T B] ~ q + b_matrix / r~``.
    """

    q: np.ndarray
    b_matrix: np.ndarray
    design: str

    @property
    def b(self) -> float:
        return float(np.trace(self.b_matrix))

    @property
    def q_scalar(self) -> float:
        return float(np.trace(self.q))


def population_q_b(truth, spec, design: str = "balanced") -> PopulationQB:
    """Finite-``m`` ``Q`` and ``b`` for a categorical generator.

    ``truth`` supplies the realized environment means ``mu`` and noise
    scales ``sigma_x_env``; ``spec`` supplies ``gamma_x`` and ``sigma_u``.
    The per-environment covariance of ``X`` is
    ``Sigma_e = gamma_x^2 sigma_u^2 11^T + sigma_{x,e}^2 Id``.

    ``design="balanced"`` (exactly ``r~`` draws per environment, as the
    generator produces) gives ``b_matrix = (1 - 1/m) mean_e Sigma_e``.
    ``design="iid"`` (environments drawn uniformly at random) adds the
    sampling variance of the environment counts:
    ``b_matrix = (1 - 1/m) mean_e Sigma_e + (1 - 2/m) q``.
    """
    if getattr(spec, "kind", "categorical") != "categorical":
        raise ValueError("population Q and b are available for categorical generators only")
    mu = np.asarray(truth.mu, dtype=float)
    mu = mu.reshape(len(mu), -1)
    m, d = mu.shape
    dev = mu - mu.mean(0)
    q = dev.T @ dev / m
    sx = np.asarray(truth.sigma_x_env, dtype=float)
    conf = (spec.gamma_x * spec.sigma_u) ** 2
    mean_sigma = conf * np.ones((d, d)) + np.mean(sx ** 2) * np.eye(d)
    bm = (1 - 1 / m) * mean_sigma
    if design == "iid":
        bm = bm + (1 - 2 / m) * q
    elif design != "balanced":
        raise ValueError(f"unknown design {design!r}")
    return PopulationQB(q, bm, design)


def tsiv_bias_predict(beta_star: float, q: float, b: float, r_tilde: float) -> float:
    """Probability limit ``beta* q / (q + b / r~)`` of the plug-in estimator for ``d = 1``."""
    if not q > 0 or not r_tilde > 0:
        raise ValueError("need q > 0 and r_tilde > 0")
    return float(beta_star) * q / (q + b / r_tilde)


def tsiv_plateau(beta_star, q, b_matrix, r_tilde: float) -> np.ndarray:
    """Matrix version ``(q + b_matrix / r~)^-1 q beta*`` for general ``d``."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    bm = np.atleast_2d(np.asarray(b_matrix, dtype=float))
    beta_star = np.asarray(beta_star, dtype=float).reshape(-1)
    return np.linalg.solve(q + bm / r_tilde, q @ beta_star)
