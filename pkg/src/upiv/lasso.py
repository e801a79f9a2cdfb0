"""Coordinate descent for ``1/2 b^T G b - h^T b + lam ||b||_1`` with PSD ``G``."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _coordinate_descent(G, h, lam, beta, tol, max_sweeps):
    d = h.shape[0]
    grad = h - G @ beta
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(d):
            gjj = G[j, j]
            if gjj <= 0.0:
                new = 0.0
            else:
                z = grad[j] + gjj * beta[j]
                if z > lam:
                    new = (z - lam) / gjj
                elif z < -lam:
                    new = (z + lam) / gjj
                else:
                    new = 0.0
            delta = new - beta[j]
            if delta != 0.0:
                for i in range(d):
                    grad[i] -= delta * G[i, j]
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < tol:
            return beta, sweep + 1
    return beta, max_sweeps


def check_psd(G: np.ndarray, tol: float = 1e-8) -> None:
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError("G must be square")
    if not np.allclose(G, G.T, rtol=1e-8, atol=1e-12 * max(1.0, np.abs(G).max(initial=0.0))):
        raise ValueError("G must be symmetric")
    eig = np.linalg.eigvalsh(0.5 * (G + G.T))
    scale = max(1.0, float(np.abs(eig).max(initial=0.0)))
    if eig.size and eig.min() < -tol * scale:
        raise ValueError(f"G is not positive semidefinite (min eigenvalue {eig.min():.3e})")


def l1_quadratic_solve(G, h, lam: float, beta0=None, tol: float = 1e-10,
                       max_sweeps: int = 100_000, check: bool = True) -> np.ndarray:
    """Minimize ``1/2 b^T G b - h^T b + lam ||b||_1`` by cyclic soft-thresholding.

    Stops when the largest coordinate update of a sweep is below ``tol`` or
    after ``max_sweeps`` sweeps. Inactive coordinates are exact zeros.
    """
    G = np.ascontiguousarray(G, dtype=float)
    h = np.ascontiguousarray(h, dtype=float).reshape(-1)
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if check:
        check_psd(G)
    beta = np.zeros_like(h) if beta0 is None else np.array(beta0, dtype=float)
    beta, _ = _coordinate_descent(0.5 * (G + G.T), h, float(lam), beta, tol, max_sweeps)
    return beta


def l1_path_iter(G, h, lams, tol: float = 1e-10, max_sweeps: int = 100_000):
    """Yield ``(lam, beta)`` along ``lams``, each solve warm-started from the previous one."""
    G = np.ascontiguousarray(G, dtype=float)
    h = np.ascontiguousarray(h, dtype=float).reshape(-1)
    check_psd(G)
    Gs = 0.5 * (G + G.T)
    beta = np.zeros_like(h)
    for lam in lams:
        beta, _ = _coordinate_descent(Gs, h, float(lam), beta.copy(), tol, max_sweeps)
        yield float(lam), beta.copy()


def l1_path(G, h, lams, tol: float = 1e-10, max_sweeps: int = 100_000) -> list[np.ndarray]:
    """Solutions along ``lams`` (warm-started in the given order)."""
    return [b for _, b in l1_path_iter(G, h, lams, tol, max_sweeps)]


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)
