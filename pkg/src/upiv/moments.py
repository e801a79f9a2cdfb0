"""Empirical cross-covariances for unpaired two-sample data.

Everything here uses the 1/n normalization with sample means subtracted.
One-hot instruments are stored as integer environment labels and never
materialized as dense ``n x m`` matrices; the helpers below compute the
same quantities through per-environment sums.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class InstrumentKind(str, enum.Enum):
    ONEHOT = "onehot"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class UnpairedDataset:
    """Two independent samples ``{(I_i, Y_i)}`` and ``{(I~_j, X~_j)}``.

    For ``kind == ONEHOT`` the instrument arrays ``z_y`` and ``z_x`` hold
    integer environment labels in ``[0, m)``; for ``CONTINUOUS`` they are
    dense ``(n, m)`` and ``(n_tilde, m)`` float arrays.
    """

    z_y: np.ndarray
    y: np.ndarray
    z_x: np.ndarray
    x: np.ndarray
    kind: InstrumentKind
    m: int

    def __post_init__(self):
        kind = InstrumentKind(self.kind)
        object.__setattr__(self, "kind", kind)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if kind is InstrumentKind.ONEHOT:
            z_y = np.asarray(self.z_y).reshape(-1)
            z_x = np.asarray(self.z_x).reshape(-1)
            for z in (z_y, z_x):
                if z.size and (not np.issubdtype(z.dtype, np.integer)
                               or z.min() < 0 or z.max() >= self.m):
                    raise ValueError("one-hot labels must be integers in [0, m)")
            z_y = z_y.astype(np.int64)
            z_x = z_x.astype(np.int64)
        else:
            z_y = np.asarray(self.z_y, dtype=float)
            z_x = np.asarray(self.z_x, dtype=float)
            if z_y.ndim != 2 or z_y.shape[1] != self.m or z_x.ndim != 2 or z_x.shape[1] != self.m:
                raise ValueError("continuous instruments must have shape (n, m)")
        if len(z_y) != len(y) or len(z_x) != len(x):
            raise ValueError("instrument and value arrays differ in length")
        if len(y) < 2 or len(x) < 2:
            raise ValueError("degenerate sample: need n >= 2 and n_tilde >= 2")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("non-finite values in dataset")
        object.__setattr__(self, "z_y", z_y)
        object.__setattr__(self, "z_x", z_x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_tilde(self) -> int:
        return len(self.x)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def N(self) -> int:
        return self.n + self.n_tilde

    def dense_instruments(self, sample: str) -> np.ndarray:
        """Return the instrument matrix of the ``"y"`` or ``"x"`` sample as dense floats."""
        z = self.z_y if sample == "y" else self.z_x
        if self.kind is InstrumentKind.CONTINUOUS:
            return z
        out = np.zeros((len(z), self.m))
        out[np.arange(len(z)), z] = 1.0
        return out

    @classmethod
    def from_dense(cls, i_y, y, i_x, x, kind=None) -> "UnpairedDataset":
        """Build a dataset from dense instrument matrices.

        With ``kind=None`` the kind is inferred: one-hot when every row of
        both instrument matrices is a standard basis vector.
        """
        i_y = np.atleast_2d(np.asarray(i_y, dtype=float))
        i_x = np.atleast_2d(np.asarray(i_x, dtype=float))
        m = i_y.shape[1]
        if i_x.shape[1] != m:
            raise ValueError("instrument dimensions differ between samples")
        onehot = _is_onehot(i_y) and _is_onehot(i_x)
        if kind is None:
            kind = InstrumentKind.ONEHOT if onehot else InstrumentKind.CONTINUOUS
        kind = InstrumentKind(kind)
        if kind is InstrumentKind.ONEHOT:
            if not onehot:
                raise ValueError("instrument rows are not standard basis vectors")
            return cls(i_y.argmax(1), y, i_x.argmax(1), x, kind, m)
        return cls(i_y, y, i_x, x, kind, m)


def _is_onehot(z: np.ndarray) -> bool:
    return bool(np.all((z == 0) | (z == 1)) and np.all(z.sum(1) == 1))


@dataclass(frozen=True)
class MomentSystem:
    """``a = Cov^(I, Y)`` and ``B = Cov^(I~, X~)`` with their sample sizes."""

    a: np.ndarray
    B: np.ndarray
    n: int
    n_tilde: int

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    @property
    def N(self) -> int:
        return self.n + self.n_tilde


@dataclass(frozen=True)
class CrossMoments:
    c_xx: np.ndarray
    c_xy: np.ndarray
    construction: str
    m_scale: float
    folds: int | None = None
    redraws: int | None = None
    stratified: bool = False


@dataclass(frozen=True)
class MomentVariance:
    """``omega = tau_n^-1 Omega_m + tilde_tau_n^-1 Omega_c``, the variance of ``sqrt(N) g_N``."""

    omega: np.ndarray
    tau_n: float
    tilde_tau_n: float
    parts: dict = field(default_factory=dict, compare=False, repr=False)


# ---------------------------------------------------------------------------
# covariance primitives


def cov_hat(u, v) -> np.ndarray:
    """Centered cross-covariance ``(1/n) sum_i (u_i - u_bar)(v_i - v_bar)^T``.

    ``u`` is ``(n, p)`` and ``v`` is ``(n,)`` or ``(n, q)``; the result has
    shape ``(p,)`` or ``(p, q)`` accordingly.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if len(u) < 2 or len(u) != len(v):
        raise ValueError("degenerate sample")
    uc = u - u.mean(0)
    vc = v - v.mean(0)
    return uc.T @ vc / len(u)


def group_sums(labels: np.ndarray, values: np.ndarray, m: int) -> np.ndarray:
    """Per-environment column sums, shape ``(m,) + values.shape[1:]``."""
    n = len(labels)
    ind = sp.csr_matrix((np.ones(n), (labels, np.arange(n))), shape=(m, n))
    out = ind @ values
    return np.asarray(out)


def onehot_cov(labels, values, m, shares=None, value_mean=None) -> np.ndarray:
    """``cov_hat`` of one-hot instruments given by ``labels`` against ``values``.

    ``shares``/``value_mean`` override the centering points (the sample
    environment shares and the sample mean of ``values`` by default).
    """
    values = np.asarray(values, dtype=float)
    n = len(labels)
    counts = np.bincount(labels, minlength=m).astype(float)
    sums = group_sums(labels, values, m)
    vbar = values.mean(0)
    vm = vbar if value_mean is None else np.asarray(value_mean, dtype=float)
    p = counts / n if shares is None else np.asarray(shares, dtype=float)
    if values.ndim == 1:
        return (sums - counts * vm) / n - p * (vbar - vm)
    return (sums - np.outer(counts, vm)) / n - np.outer(p, vbar - vm)


def instrument_cov(z, values, kind, m) -> np.ndarray:
    if InstrumentKind(kind) is InstrumentKind.ONEHOT:
        if len(z) < 2:
            raise ValueError("degenerate sample")
        return onehot_cov(z, values, m)
    return cov_hat(z, values)


def moment_system(ds: UnpairedDataset) -> MomentSystem:
    a = instrument_cov(ds.z_y, ds.y, ds.kind, ds.m)
    B = instrument_cov(ds.z_x, ds.x, ds.kind, ds.m)
    return MomentSystem(a=a, B=B, n=ds.n, n_tilde=ds.n_tilde)


def _centered_instrument_sq_norms(z, kind, m) -> np.ndarray:
    """``||I_j - I_bar||^2`` for every row."""
    if InstrumentKind(kind) is InstrumentKind.ONEHOT:
        p = np.bincount(z, minlength=m) / len(z)
        return 1.0 - 2.0 * p[z] + p @ p
    zc = z - z.mean(0)
    return np.einsum("ij,ij->i", zc, zc)


# ---------------------------------------------------------------------------
# folds and denominators


def fold_cross_cov(z_fold, x_fold, kind, m, centers=None) -> np.ndarray:
    """Covariance ``B_k`` of one fold of the x-sample.

    By default the fold is centered at its own means: for one-hot
    instruments row ``e`` is ``p_{k,e} (X_bar_{k,e} - X_bar_k)``, and an
    environment absent from the fold gives a zero row. Passing
    ``centers=(instrument_mean, covariate_mean)`` centers at fixed points
    instead, i.e. ``B_k`` becomes the fold average of the globally centered
    summands ``(I~_j - I_bar)(X~_j - X_bar)^T``.
    """
    x_fold = np.asarray(x_fold, dtype=float)
    if len(x_fold) == 0:
        raise ValueError("empty fold")
    kind = InstrumentKind(kind)
    if centers is None:
        if kind is InstrumentKind.ONEHOT:
            return onehot_cov(z_fold, x_fold, m)
        zc = z_fold - z_fold.mean(0)
        return zc.T @ (x_fold - x_fold.mean(0)) / len(x_fold)
    z_mean, x_mean = centers
    if kind is InstrumentKind.ONEHOT:
        return onehot_cov(z_fold, x_fold, m, shares=z_mean, value_mean=x_mean)
    return (z_fold - z_mean).T @ (x_fold - x_mean) / len(x_fold)


def split_folds(z, kind, K: int, rng, stratify: bool | None = None) -> np.ndarray:
    """Random fold assignment of ``len(z)`` rows into ``K`` folds.

    One-hot rows are stratified by environment unless ``stratify=False``:
    rows are shuffled within environments, laid out environment by
    environment, and dealt to folds round-robin. Leftover rows therefore go
    to the lowest-numbered folds first.
    """
    n = len(z)
    if n < K:
        raise ValueError("too few observations for K folds")
    if K < 2:
        raise ValueError("need K >= 2 folds")
    onehot = InstrumentKind(kind) is InstrumentKind.ONEHOT
    if stratify is None:
        stratify = onehot
    if stratify and not onehot:
        raise ValueError("stratified splits require one-hot instruments")
    fold = np.empty(n, dtype=np.int64)
    if stratify:
        order = np.lexsort((rng.random(n), z))
    else:
        order = rng.permutation(n)
    fold[order] = np.arange(n) % K
    return fold


def _pairwise_cross(blocks: list[np.ndarray], m: int) -> np.ndarray:
    """``m / (K(K-1)) * sum_{h != k} B_h^T B_k``."""
    K = len(blocks)
    total = sum(blocks)
    acc = total.T @ total - sum(b.T @ b for b in blocks)
    return m / (K * (K - 1)) * acc


def cross_fold_denominator_mc(ds: UnpairedDataset, K: int = 2, H: int = 10, rng=None,
                              stratify: bool | None = None) -> np.ndarray:
    """Monte-Carlo cross-fold denominator ``C_XX`` averaged over ``H`` random splits."""
    if H < 1:
        raise ValueError("need H >= 1 redraws")
    if ds.n_tilde < K:
        raise ValueError("too few observations for K folds")
    rng = np.random.default_rng(rng)
    acc = np.zeros((ds.d, ds.d))
    for _ in range(H):
        fold = split_folds(ds.z_x, ds.kind, K, rng, stratify)
        blocks = [fold_cross_cov(ds.z_x[fold == k], ds.x[fold == k], ds.kind, ds.m)
                  for k in range(K)]
        acc += _pairwise_cross(blocks, ds.m)
    return acc / H


def cross_fold_denominator_analytic(ds: UnpairedDataset, stratify: bool = False) -> np.ndarray:
    """Closed-form limit of the cross-fold denominator as the number of splits grows.

    With ``stratify=False`` this is the average over uniformly random
    equal-size splits,
    ``m [ n/(n-1) B^T B - 1/(n(n-1)) sum_j g_j^T g_j ]`` with
    ``g_j = (I~_j - I_bar)(X~_j - X_bar)^T``.

    With ``stratify=True`` (one-hot only) it is the average over splits that
    halve every environment, which is what :func:`cross_fold_denominator_mc`
    draws for one-hot data. Same-environment pairs then get weight
    ``n_e/(n_e-1)`` and cross-environment pairs weight 1. Exact when every
    environment count is divisible by the fold count.
    """
    n = ds.n_tilde
    if n < 2:
        raise ValueError("degenerate sample")
    B = instrument_cov(ds.z_x, ds.x, ds.kind, ds.m)
    xc = ds.x - ds.x.mean(0)
    w = _centered_instrument_sq_norms(ds.z_x, ds.kind, ds.m)
    if not stratify:
        self_gram = xc.T @ (w[:, None] * xc)
        out = ds.m * (n / (n - 1) * (B.T @ B) - self_gram / (n * (n - 1)))
        return 0.5 * (out + out.T)
    if ds.kind is not InstrumentKind.ONEHOT:
        raise ValueError("stratified splits require one-hot instruments")
    m = ds.m
    counts = np.bincount(ds.z_x, minlength=m).astype(float)
    p = counts / n
    c = 1.0 - 2.0 * p + p @ p  # ||e_e - p||^2 per environment
    s = group_sums(ds.z_x, xc, m)  # (m, d)
    blocks = (s * c[:, None]).T @ s  # sum_e G_e^T G_e
    pair_w = np.zeros(m)
    ok = counts >= 2
    pair_w[ok] = counts[ok] / (counts[ok] - 1.0)
    diag = xc.T @ ((c * pair_w)[ds.z_x][:, None] * xc)  # sum_e w_e D_e
    within = (s * (c * pair_w)[:, None]).T @ s - diag
    total = n * n * (B.T @ B)
    out = m / (n * n) * (total - blocks + within)
    return 0.5 * (out + out.T)


def cross_moments(ds: UnpairedDataset, denominator: str = "analytic", K: int = 2, H: int = 10,
                  rng=None, stratify: bool | None = None, ms: MomentSystem | None = None) -> CrossMoments:
    """Bias-corrected pair ``(C_XX, C_XY)``; both carry the factor ``m``."""
    ms = moment_system(ds) if ms is None else ms
    if stratify is None:
        stratify = ds.kind is InstrumentKind.ONEHOT
    c_xy = ds.m * (ms.B.T @ ms.a)
    if denominator == "analytic":
        c_xx = cross_fold_denominator_analytic(ds, stratify=stratify)
        return CrossMoments(c_xx, c_xy, "analytic", float(ds.m), stratified=stratify)
    if denominator in ("mc", "montecarlo"):
        c_xx = cross_fold_denominator_mc(ds, K, H, rng, stratify=stratify)
        return CrossMoments(c_xx, c_xy, "montecarlo", float(ds.m), K, H, stratify)
    raise ValueError(f"unknown denominator {denominator!r}")


# ---------------------------------------------------------------------------
# moment variance


def _onehot_second_moment(labels, t, m, a) -> np.ndarray:
    """Centered covariance of ``(e_{label_i} - p) t_i`` whose mean is ``a``."""
    n = len(labels)
    p = np.bincount(labels, minlength=m) / n
    S = np.bincount(labels, weights=t * t, minlength=m)
    M = np.diag(S) - np.outer(S, p) - np.outer(p, S) + S.sum() * np.outer(p, p)
    return M / n - np.outer(a, a)


def _sample_moment_terms(ds: UnpairedDataset, beta0):
    """Per-observation scalars multiplying the centered instruments: ``Y_c`` and ``X~_c^T beta0``."""
    yc = ds.y - ds.y.mean()
    t = (ds.x - ds.x.mean(0)) @ np.asarray(beta0, dtype=float)
    return yc, t


def omega_hat(ds: UnpairedDataset, beta0) -> MomentVariance:
    """Variance estimate of the unpaired sample moment at a preliminary ``beta0``."""
    beta0 = np.asarray(beta0, dtype=float).reshape(-1)
    if beta0.shape != (ds.d,) or not np.all(np.isfinite(beta0)):
        raise ValueError("beta0 must be a finite vector of length d")
    yc, t = _sample_moment_terms(ds, beta0)
    if ds.kind is InstrumentKind.ONEHOT:
        a = onehot_cov(ds.z_y, ds.y, ds.m)
        c = onehot_cov(ds.z_x, t, ds.m)
        om_m = _onehot_second_moment(ds.z_y, yc, ds.m, a)
        om_c = _onehot_second_moment(ds.z_x, t, ds.m, c)
    else:
        zy = ds.z_y - ds.z_y.mean(0)
        zx = ds.z_x - ds.z_x.mean(0)
        g = zy * yc[:, None]
        h = zx * t[:, None]
        g -= g.mean(0)
        h -= h.mean(0)
        om_m = g.T @ g / ds.n
        om_c = h.T @ h / ds.n_tilde
    tau = ds.n / ds.N
    ttau = ds.n_tilde / ds.N
    omega = om_m / tau + om_c / ttau
    omega = 0.5 * (omega + omega.T)
    return MomentVariance(omega, tau, ttau, {"omega_m": om_m, "omega_c": om_c})


def projected_omega(ds: UnpairedDataset, beta0, P) -> np.ndarray:
    """``P^T omega_hat(ds, beta0).omega P`` without forming the ``m x m`` matrix."""
    P = np.asarray(P, dtype=float)
    yc, t = _sample_moment_terms(ds, beta0)

    def proj_rows(z):
        if ds.kind is InstrumentKind.ONEHOT:
            p = np.bincount(z, minlength=ds.m) / len(z)
            return P[z] - p @ P
        return (z - z.mean(0)) @ P

    g = proj_rows(ds.z_y) * yc[:, None]
    h = proj_rows(ds.z_x) * t[:, None]
    g -= g.mean(0)
    h -= h.mean(0)
    out = (ds.N / ds.n) * (g.T @ g / ds.n) + (ds.N / ds.n_tilde) * (h.T @ h / ds.n_tilde)
    return 0.5 * (out + out.T)
