"""Estimators for the linear causal effect from unpaired two-sample data.

TS-IV, TS-2SLS and naive OLS are the baselines. ``up_gmm`` is the
two-sample GMM estimator (optionally optimally weighted, l1-penalized and
refitted on the selected support); ``up_gmm_hd`` replaces the plug-in
denominator by cross-fold cross-moments for the many-instrument regime.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .inference import WeightFactor, sandwich_variance, wald_ci, weighted
from .lasso import l1_path, l1_path_iter
from .moments import (
    InstrumentKind,
    MomentSystem,
    UnpairedDataset,
    cross_moments,
    group_sums,
    moment_system,
    omega_hat,
    projected_omega,
)

# multiples of lambda_max = ||h||_inf searched by the information criterion
DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.logspace(0, -4, 60))


@dataclass(frozen=True)
class EstimatorConfig:
    """Options shared by the GMM estimators.

    Penalty: ``lam`` fixes it outright; ``lam_scale=c`` uses ``c / sqrt(N)``
    (finite ``m``) or ``c / sqrt(m)`` (cross-moment estimator); otherwise it
    is chosen from ``lam_grid * ||h||_inf`` by a BIC-type criterion; the
    path stops after ``path_patience`` distinct supports without improvement.
    ``beta_min`` switches support selection from the nonzero pattern to
    ``|beta_j| >= beta_min / 2``.
    """

    ridge: float = 1e-10
    optimal_weight: bool = False
    l1: bool = False
    lam: float | None = None
    lam_scale: float | None = None
    lam_grid: tuple = DEFAULT_LAMBDA_GRID
    path_patience: int = 10
    post_refit: bool = False
    K: int = 2
    H: int = 10
    denominator: str = "analytic"
    stratify: bool | None = None
    beta_min: float | None = None
    ci_level: float | None = None

    def __post_init__(self):
        if not self.ridge > 0:
            raise ValueError("ridge must be > 0")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.path_patience < 1:
            raise ValueError("path_patience must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.denominator not in ("analytic", "mc", "montecarlo"):
            raise ValueError(f"unknown denominator {self.denominator!r}")
        if self.ci_level is not None and not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")
        object.__setattr__(self, "lam_grid", tuple(float(v) for v in self.lam_grid))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown estimator options: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Estimate:
    beta: np.ndarray
    support: tuple[int, ...] | None = None
    ci: np.ndarray | None = None
    level: float | None = None
    weight_used: str = "identity"
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "support": None if self.support is None else [int(j) for j in self.support],
            "ci": None if self.ci is None else [[float(lo), float(hi)] for lo, hi in self.ci],
            "level": self.level,
            "weight_used": self.weight_used,
            "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()},
        }


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


# ---------------------------------------------------------------------------
# linear algebra helpers


def _solve_ridged(A: np.ndarray, b: np.ndarray, ridge: float) -> tuple[np.ndarray, float]:
    """Solve ``(A + ridge I) x = b`` for symmetric PSD ``A``; returns ``(x, cond)``."""
    M = 0.5 * (A + A.T) + ridge * np.eye(A.shape[0])
    if M.shape[0] == 0:
        return np.zeros(0), 1.0
    cond = float(np.linalg.cond(M))
    try:
        x = sla.cho_solve(sla.cho_factor(M), b)
    except np.linalg.LinAlgError:
        x = np.linalg.lstsq(M, b, rcond=None)[0]
    return x, cond


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def _quad(r: np.ndarray, W: WeightFactor | None) -> float:
    lr = weighted(W, r)
    return float(lr @ lr)


# ---------------------------------------------------------------------------
# baselines


def ts_iv(ms: MomentSystem, ridge: float = 1e-10) -> Estimate:
    """Plug-in two-sample IV: ``(B^T B + ridge I) beta = B^T a``."""
    _check_finite(ms.a, ms.B)
    beta, cond = _solve_ridged(ms.B.T @ ms.B, ms.B.T @ ms.a, ridge)
    r = ms.a - ms.B @ beta
    return Estimate(beta, diagnostics={"condition_number": cond, "objective": float(r @ r)})


def ts_2sls(ds: UnpairedDataset, ridge: float = 1e-10) -> Estimate:
    """Two-sample 2SLS: first stage on the x-sample, second stage on predicted covariates."""
    xc = ds.x - ds.x.mean(0)
    yc = ds.y - ds.y.mean()
    if ds.kind is InstrumentKind.ONEHOT:
        m = ds.m
        pt = np.bincount(ds.z_x, minlength=m) / ds.n_tilde
        gram = ds.n_tilde * (np.diag(pt) - np.outer(pt, pt))
        cross = group_sums(ds.z_x, xc, m) - np.outer(pt * ds.n_tilde, xc.mean(0))
        gamma, _ = _solve_ridged(gram, cross, ridge)
        counts = np.bincount(ds.z_y, minlength=m).astype(float)
        centred = gamma - (counts / ds.n) @ gamma
        xtx = centred.T @ (counts[:, None] * centred)
        xty = centred.T @ np.bincount(ds.z_y, weights=yc, minlength=m)
    else:
        zt = ds.z_x - ds.z_x.mean(0)
        gamma, _ = _solve_ridged(zt.T @ zt, zt.T @ xc, ridge)
        xhat = (ds.z_y - ds.z_y.mean(0)) @ gamma
        xtx = xhat.T @ xhat
        xty = xhat.T @ yc
    _check_finite(xtx, xty)
    beta, cond = _solve_ridged(xtx, xty, ridge)
    return Estimate(beta, diagnostics={"condition_number": cond})


def naive_ols(ds: UnpairedDataset, rng=None) -> Estimate:
    """OLS of ``Y`` on randomly paired ``X~`` rows. Baseline only; ignores the IV structure."""
    rng = np.random.default_rng(rng)
    k = min(ds.n, ds.n_tilde)
    ix = rng.choice(ds.n_tilde, size=k, replace=False)
    iy = rng.choice(ds.n, size=k, replace=False)
    xp = ds.x[ix] - ds.x[ix].mean(0)
    yp = ds.y[iy] - ds.y[iy].mean()
    beta = np.linalg.pinv(xp.T @ xp) @ (xp.T @ yp)
    return Estimate(beta)


# ---------------------------------------------------------------------------
# penalized fitting shared by the GMM estimators


@dataclass
class _Problem:
    """Weighted least-squares moment problem ``min (t - A b)^T W (t - A b)``."""

    A: np.ndarray
    target: np.ndarray
    W: WeightFactor | None
    ridge: float

    def gram(self):
        LA = weighted(self.W, self.A)
        return LA.T @ LA, LA.T @ weighted(self.W, self.target)

    def objective(self, beta):
        return _quad(self.target - self.A @ beta, self.W)


def _support_of(beta: np.ndarray, beta_min: float | None) -> tuple[int, ...]:
    if beta_min is None:
        return tuple(int(j) for j in np.flatnonzero(beta != 0))
    return tuple(int(j) for j in np.flatnonzero(np.abs(beta) >= beta_min / 2))


def _refit_same_weight(G, h, support, ridge):
    beta = np.zeros(len(h))
    if support:
        idx = list(support)
        beta[idx], _ = _solve_ridged(G[np.ix_(idx, idx)], h[idx], ridge)
    return beta


def _penalized_fit(prob: _Problem, cfg: EstimatorConfig, rate: float, N: int, score,
                   refit=None):
    """l1 path plus a GMM-BIC choice of the penalty.

    Each distinct support ``S`` on the path is scored by
    ``score(beta_S) + |S| log N`` where ``beta_S = refit(S)`` (by default the
    dense solution on ``S`` under the same weight) and ``score`` is the
    standardized J statistic ``N g^T Omega^-1 g``. Returns
    ``(beta_l1, support, lam, criterion_table)``.
    """
    G, h = prob.gram()
    G = 0.5 * (G + G.T)
    lam_max = float(np.abs(h).max(initial=0.0))
    if cfg.lam is not None:
        lams = [cfg.lam]
    elif cfg.lam_scale is not None:
        lams = [cfg.lam_scale * rate]
    else:
        lams = sorted({lam_max * c for c in cfg.lam_grid}, reverse=True)
    if len(lams) == 1:
        beta = l1_path(G, h, lams)[0]
        return beta, _support_of(beta, cfg.beta_min), lams[0], []
    if refit is None:
        refit = lambda s: _refit_same_weight(G, h, s, prob.ridge)  # noqa: E731
    best = None
    table = []
    seen = {}
    stale = 0
    for lam, beta in l1_path_iter(G, h, lams):
        support = _support_of(beta, cfg.beta_min)
        # J >= 0, so |S| log N bounds the criterion from below; once it exceeds
        # the best value the (growing) path cannot improve and is cut short
        if best is not None and len(support) * np.log(N) > best[0]:
            break
        fresh = support not in seen
        if fresh:
            seen[support] = score(refit(support)) + len(support) * np.log(N)
        crit = seen[support]
        table.append((lam, len(support), crit))
        if best is None or crit < best[0] - 1e-9:
            best = (crit, lam, beta, support)
            stale = 0
        elif fresh:
            # patience counts distinct supports that failed to improve
            stale += 1
            if stale >= cfg.path_patience:
                break
    _, lam, beta, support = best
    return beta, support, lam, table


def _j_statistic(g: np.ndarray, V: np.ndarray, N: int) -> float:
    """``N g^T V^+ g`` with a pseudo-inverse of the moment variance."""
    Vinv = np.linalg.pinv(0.5 * (V + V.T), rcond=1e-10, hermitian=True)
    return float(N * g @ Vinv @ g)


# ---------------------------------------------------------------------------
# finite-m GMM


def _weight_from_omega(om: np.ndarray, ridge: float) -> WeightFactor:
    return WeightFactor.inverse_of(om, ridge)


def _try_weight(ds, beta0, ridge):
    """``((Omega_hat(beta0) + ridge I)^-1, "omega_inverse")``, or the identity if not positive definite."""
    try:
        return _weight_from_omega(omega_hat(ds, beta0).omega, ridge), "omega_inverse"
    except np.linalg.LinAlgError:
        return None, "identity"


def _attach_ci(est: Estimate, ds, ms, W, support, level):
    sv = sandwich_variance(ms, omega_hat(ds, est.beta), W, support)
    est.ci = wald_ci(est.beta, sv, ds.N, level)
    est.level = level
    est.diagnostics["variance"] = sv.v
    return est


def up_gmm(ds: UnpairedDataset, cfg: EstimatorConfig | None = None, rng=None) -> Estimate:
    """Unpaired two-sample GMM on ``g_N(b) = a - B b``.

    With ``optimal_weight`` the weight is ``(Omega_hat(beta0) + ridge I)^-1``
    at the identity-weight solution ``beta0``. With ``l1`` the penalized
    problem is solved along a penalty path; ``post_refit`` then re-solves the
    dense problem on the selected support (see :func:`gmm_on_support`).
    Intervals are attached when ``ci_level`` is set and the final estimate
    is a dense or refitted GMM solution.
    """
    cfg = cfg or EstimatorConfig()
    ms = moment_system(ds)
    a, B = ms.a, ms.B
    _check_finite(a, B)
    beta0, _ = _solve_ridged(B.T @ B, B.T @ a, cfg.ridge)
    W, weight_used = _try_weight(ds, beta0, cfg.ridge) if cfg.optimal_weight else (None, "identity")
    prob = _Problem(B, a, W, cfg.ridge)
    if not cfg.l1:
        G, h = prob.gram()
        beta, cond = _solve_ridged(G, h, cfg.ridge)
        est = Estimate(beta, weight_used=weight_used,
                       diagnostics={"condition_number": cond, "objective": prob.objective(beta)})
        if cfg.ci_level is not None:
            _attach_ci(est, ds, ms, W, None, cfg.ci_level)
        return est

    def score(b):
        return _j_statistic(a - B @ b, omega_hat(ds, b).omega, ds.N)

    beta, support, lam, table = _penalized_fit(prob, cfg, 1 / np.sqrt(ds.N), ds.N, score)
    if cfg.post_refit:
        est = gmm_on_support(ds, support, cfg, ms)
    else:
        est = Estimate(beta, support=support, weight_used=weight_used,
                       diagnostics={"condition_number": None, "objective": prob.objective(beta)})
    est.diagnostics["lambda"] = lam
    est.diagnostics["lambda_table"] = table
    return est


def gmm_on_support(ds: UnpairedDataset, support, cfg: EstimatorConfig | None = None,
                   ms: MomentSystem | None = None) -> Estimate:
    """Dense GMM restricted to the covariates in ``support`` (zeros elsewhere).

    With ``cfg.optimal_weight`` the weight is ``(Omega_S + ridge I)^-1`` where
    ``Omega_S`` is the moment variance at the identity-weight solution on the
    support; the identity is used if that matrix is not positive definite.
    Intervals on the support are attached when ``cfg.ci_level`` is set.
    """
    cfg = cfg or EstimatorConfig()
    ms = moment_system(ds) if ms is None else ms
    support = tuple(sorted(int(j) for j in support))
    beta = np.zeros(ds.d)
    if not support:
        est = Estimate(beta, support=(), diagnostics={"condition_number": None,
                                                      "objective": float(ms.a @ ms.a)})
        if cfg.ci_level is not None:
            est.ci = np.zeros((ds.d, 2))
            est.level = cfg.ci_level
        return est
    idx = list(support)
    BS = ms.B[:, idx]
    b0, _ = _solve_ridged(BS.T @ BS, BS.T @ ms.a, cfg.ridge)
    W, label = None, "identity"
    if cfg.optimal_weight:
        full = np.zeros(ds.d)
        full[idx] = b0
        W, label = _try_weight(ds, full, cfg.ridge)
    LB = weighted(W, BS)
    beta[idx], cond = _solve_ridged(LB.T @ LB, LB.T @ weighted(W, ms.a), cfg.ridge)
    r = ms.a - ms.B @ beta
    est = Estimate(beta, support=_support_of(beta, None), weight_used=label,
                   diagnostics={"condition_number": cond, "objective": _quad(r, W)})
    if cfg.ci_level is not None:
        _attach_ci(est, ds, ms, W, support, cfg.ci_level)
    return est


# ---------------------------------------------------------------------------
# cross-moment GMM for many instruments


def up_gmm_hd(ds: UnpairedDataset, cfg: EstimatorConfig | None = None, rng=None) -> Estimate:
    """Cross-moment GMM on ``g(b) = C_XY - C_XX b``.

    ``cfg.denominator`` picks the Monte-Carlo cross-fold denominator
    (``K`` folds, ``H`` redraws, random stream ``rng``) or its closed-form
    limit. With ``optimal_weight`` the ``d x d`` weight is the inverse of
    ``m^2 B^T Omega_hat B``, the variance proxy of the projected moment,
    with ``Omega_hat`` taken at the identity-weight solution.
    """
    cfg = cfg or EstimatorConfig()
    ms = moment_system(ds)
    _check_finite(ms.a, ms.B)
    cm = cross_moments(ds, cfg.denominator, cfg.K, cfg.H, rng, cfg.stratify, ms)
    C, c = cm.c_xx, cm.c_xy
    _check_finite(C, c)
    W = None
    weight_used = "identity"
    if cfg.optimal_weight:
        # weight from the variance of the projected moment at the identity-weight solution
        beta0, _ = _solve_ridged(C.T @ C, C.T @ c, cfg.ridge)
        om = ds.m ** 2 * projected_omega(ds, beta0, ms.B)
        try:
            W = _weight_from_omega(om, cfg.ridge)
            weight_used = "omega_inverse"
        except np.linalg.LinAlgError:
            W = None
    prob = _Problem(C, c, W, cfg.ridge)
    diag: dict = {"denominator": cm.construction, "stratified": cm.stratified}
    support = None
    if not cfg.l1:
        G, h = prob.gram()
        beta, cond = _solve_ridged(G, h, cfg.ridge)
    else:
        refit = _hd_refit(C, c, cfg.ridge)
        def score(b):
            V = ds.m ** 2 * projected_omega(ds, b, ms.B)
            return _j_statistic(c - C @ b, V, ds.N)

        beta, support, lam, table = _penalized_fit(
            prob, cfg, 1 / np.sqrt(ds.m), ds.N, score, refit if cfg.post_refit else None)
        diag["lambda"] = lam
        diag["lambda_table"] = table
        cond = None
        if cfg.post_refit:
            beta = refit(support)
            idx = list(support)
            cond = float(np.linalg.cond(C[np.ix_(idx, idx)])) if idx else None
            support = _support_of(beta, None) if cfg.beta_min is None else support
    diag["condition_number"] = cond
    diag["objective"] = prob.objective(beta)
    return Estimate(beta, support=support, weight_used=weight_used, diagnostics=diag)


def _hd_refit(C, c, ridge):
    """Cross-moment estimator on a support: solves ``C[S, S] beta_S = c[S]``.

    ``C`` is a bias-corrected Gram-type matrix, so restricting it to ``S``
    is the analog of least squares on the selected covariates.
    """
    def refit(support):
        beta = np.zeros(len(c))
        if support:
            idx = list(support)
            Css = C[np.ix_(idx, idx)] + ridge * np.eye(len(idx))
            try:
                beta[idx] = np.linalg.solve(Css, c[idx])
            except np.linalg.LinAlgError:
                beta[idx] = np.linalg.lstsq(Css, c[idx], rcond=None)[0]
        return beta
    return refit


ESTIMATORS = {
    "ts_iv": lambda ds, cfg, rng: ts_iv(moment_system(ds), cfg.ridge),
    "ts_2sls": lambda ds, cfg, rng: ts_2sls(ds, cfg.ridge),
    "naive_ols": lambda ds, cfg, rng: naive_ols(ds, rng),
    "up_gmm": up_gmm,
    "up_gmm_hd": up_gmm_hd,
}


def estimate(method: str, ds: UnpairedDataset, cfg: EstimatorConfig | None = None, rng=None) -> Estimate:
    """Dispatch by estimator name (see ``ESTIMATORS``)."""
    try:
        fn = ESTIMATORS[method]
    except KeyError:
        raise ValueError(f"unknown estimator {method!r}; choose from {sorted(ESTIMATORS)}") from None
    return fn(ds, cfg or EstimatorConfig(), rng)
