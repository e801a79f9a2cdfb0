"""Sandwich variances and Wald intervals for the unpaired GMM estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .moments import MomentSystem, MomentVariance


@dataclass(frozen=True)
class WeightFactor:
    """A GMM weight held as ``W = L^T L``.

    Weighted products are formed from ``L @ A``, so a near-null direction of
    ``W^-1`` (one-hot moments always have one) does not spread roundoff
    through every entry of an explicit ``W``.
    """

    L: np.ndarray

    @classmethod
    def inverse_of(cls, M: np.ndarray, shift: float = 0.0) -> "WeightFactor":
        """Factor of ``(M + shift I)^-1``; raises ``LinAlgError`` unless positive definite."""
        lam, V = np.linalg.eigh(0.5 * (M + M.T))
        lam = lam + shift
        if lam.size and lam.min() <= 0:
            raise np.linalg.LinAlgError("matrix is not positive definite")
        return cls((V / np.sqrt(lam)).T)

    @property
    def matrix(self) -> np.ndarray:
        return self.L.T @ self.L


def weighted(w, A: np.ndarray) -> np.ndarray:
    """``L @ A`` for a :class:`WeightFactor`, ``A`` for the identity (``None``)."""
    return A if w is None else w.L @ A


@dataclass(frozen=True)
class SandwichVariance:
    """Asymptotic covariance of ``sqrt(N) (beta_S - beta*_S)`` on ``support``."""

    v: np.ndarray
    support: tuple[int, ...]
    d: int


def sandwich_variance(ms, omega, w, support=None, rank_tol: float = 1e-10) -> SandwichVariance:
    """``(B_S^T W B_S)^-1 B_S^T W Omega W B_S (B_S^T W B_S)^-1``.

    ``ms`` is a :class:`MomentSystem` or the ``m x d`` matrix ``B``; ``omega``
    a :class:`MomentVariance` or an ``m x m`` array; ``w`` an ``m x m`` array,
    a :class:`WeightFactor`, or ``None`` for the identity weight. ``support=None`` uses all ``d`` coordinates.
    """
    B = ms.B if isinstance(ms, MomentSystem) else np.asarray(ms, dtype=float)
    om = omega.omega if isinstance(omega, MomentVariance) else np.asarray(omega, dtype=float)
    d = B.shape[1]
    support = tuple(range(d)) if support is None else tuple(sorted(int(j) for j in support))
    if not support:
        return SandwichVariance(np.zeros((0, 0)), support, d)
    BS = B[:, list(support)]
    sv = np.linalg.svd(BS, compute_uv=False)
    if sv[0] == 0 or np.sum(sv > rank_tol * sv[0]) < len(support):
        raise ValueError("support not identified")
    if isinstance(w, WeightFactor):
        LB = w.L @ BS
        bread = LB.T @ LB
        meat = LB.T @ (w.L @ om @ w.L.T) @ LB
    else:
        WB = BS if w is None else np.asarray(w, dtype=float) @ BS
        bread = BS.T @ WB
        meat = WB.T @ om @ WB
    inv = np.linalg.inv(0.5 * (bread + bread.T))
    v = inv @ meat @ inv
    return SandwichVariance(0.5 * (v + v.T), support, d)


def normal_quantile(p: float) -> float:
    return float(stats.norm.ppf(p))


def wald_ci(beta, sv: SandwichVariance, N: int, level: float = 0.95) -> np.ndarray:
    """Per-coordinate intervals ``beta_j -/+ z sqrt(V_jj / N)``; off-support rows are ``[0, 0]``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    beta = np.asarray(beta, dtype=float)
    z = normal_quantile(1 - (1 - level) / 2)
    ci = np.zeros((sv.d, 2))
    if sv.support:
        idx = list(sv.support)
        half = z * np.sqrt(np.clip(np.diag(sv.v), 0, None) / N)
        ci[idx, 0] = beta[idx] - half
        ci[idx, 1] = beta[idx] + half
    return ci
