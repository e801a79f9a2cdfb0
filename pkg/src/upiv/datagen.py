"""Synthetic unpaired IV data with hidden confounding.

Categorical generators use balanced one-hot environments (exactly ``r``
and ``r~`` draws per environment); continuous generators draw Gaussian
instruments with noise scales tied to each row's dominant coordinate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .moments import InstrumentKind, UnpairedDataset

SETTINGS = ("S1", "S2", "S3")
KINDS = ("categorical", "continuous")

_PRESETS = {
    "S1": dict(m=100, d=200, s_star=10, beta_rule="sparse"),
    "S2": dict(m=100, d=2, s_star=2, beta_rule="dense"),
    "S3": dict(m=100, d=100, s_star=10, k=60, beta_rule="sparse"),
}


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of a synthetic regime.

    ``seed`` drives the noise. ``structure_seed``, when given, drives the
    structural draws (``beta*``, first stage, noise scales) separately so a
    sweep over sample sizes can keep them fixed. ``beta_star`` overrides the
    random draw.
    """

    kind: str = "categorical"
    setting: str = "S1"
    m: int = 100
    d: int = 200
    s_star: int = 10
    k: int | None = None
    r: int = 10
    r_tilde: int | None = None
    beta_rule: str = "sparse"
    beta_star: tuple | None = None
    gamma_x: float = 0.2
    gamma_y: float = 0.2
    sigma_u: float = 0.2
    sigma_x: float = 1.0
    sigma_eps: float = 0.2
    pi_scale: float = 1.0
    balanced: bool = True
    scale_log_sd: float = 0.5
    scale_clip: tuple = (0.25, 4.0)
    seed: int | None = None
    structure_seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        if self.r_tilde is None:
            object.__setattr__(self, "r_tilde", self.r)
        if self.m < 1 or self.d < 1:
            raise ValueError("m and d must be positive")
        if not 0 <= self.s_star <= self.d:
            raise ValueError("s_star must lie in [0, d]")
        if self.beta_rule not in ("sparse", "dense"):
            raise ValueError("beta_rule must be 'sparse' or 'dense'")
        if self.setting == "S3" and (self.k is None or self.k < 1):
            raise ValueError("setting S3 needs a low-rank dimension k >= 1")
        if self.r < 1 or self.r_tilde < 1:
            raise ValueError("r and r_tilde must be >= 1")
        if self.kind == "categorical" and (int(self.r) != self.r or int(self.r_tilde) != self.r_tilde):
            raise ValueError("categorical r and r_tilde must be integers")
        if self.beta_star is not None:
            b = tuple(float(v) for v in np.asarray(self.beta_star, dtype=float).reshape(-1))
            if len(b) != self.d:
                raise ValueError("beta_star must have length d")
            object.__setattr__(self, "beta_star", b)
        lo, hi = self.scale_clip
        if not 0 < lo <= 1 <= hi:
            raise ValueError("scale_clip must satisfy 0 < lo <= 1 <= hi")
        object.__setattr__(self, "scale_clip", (float(lo), float(hi)))

    @property
    def n(self) -> int:
        return int(round(self.m * self.r))

    @property
    def n_tilde(self) -> int:
        return int(round(self.m * self.r_tilde))

    @classmethod
    def preset(cls, setting: str, kind: str = "categorical", **overrides) -> "GeneratorSpec":
        base = dict(_PRESETS[setting])
        base.update(overrides)
        return cls(kind=kind, setting=setting, **base)

    def with_(self, **changes) -> "GeneratorSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scale_clip"] = list(self.scale_clip)
        if self.beta_star is not None:
            out["beta_star"] = list(self.beta_star)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        data = dict(data)
        if "preset" in data:
            setting = data.pop("preset")
            kind = data.pop("kind", "categorical")
            return cls.preset(setting, kind, **_known(cls, data))
        return cls(**_known(cls, data))


def _known(cls, data: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown generator options: {sorted(unknown)}")
    if "scale_clip" in data:
        data["scale_clip"] = tuple(data["scale_clip"])
    return data


def save_spec(spec: GeneratorSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))


def load_spec(path) -> GeneratorSpec:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("generator config must be a mapping")
    return GeneratorSpec.from_dict(data)


@dataclass
class GroundTruth:
    beta_star: np.ndarray
    support: tuple[int, ...]
    mu: np.ndarray | None = None
    pi: np.ndarray | None = None
    A: np.ndarray | None = None
    sigma_x_env: np.ndarray | None = None
    sigma_eps_env: np.ndarray | None = None
    # covariates of the y-sample; exposed for tests only
    shadow_x: np.ndarray | None = field(default=None, repr=False)

    def first_stage_cov(self) -> np.ndarray:
        """Population ``Cov(I, X)`` of the design (balanced environments or ``I ~ N(0, Id/m)``)."""
        if self.mu is not None:
            m = len(self.mu)
            return (self.mu - self.mu.mean(0)) / m
        return self.pi / self.pi.shape[0]

    def to_dict(self) -> dict:
        out = {"beta_star": self.beta_star.tolist(), "support": list(self.support)}
        for name in ("mu", "pi", "A", "sigma_x_env", "sigma_eps_env"):
            v = getattr(self, name)
            if v is not None:
                out[name] = np.asarray(v).tolist()
        return out


# ---------------------------------------------------------------------------
# structural draws


def gen_beta(rule: str, d: int, s_star: int, rng) -> np.ndarray:
    """Coefficients with magnitudes uniform on ``[0.5, 1]`` and random signs.

    ``"sparse"`` fills ``s_star`` uniformly chosen positions, ``"dense"``
    fills all ``d``.
    """
    rng = np.random.default_rng(rng)
    k = d if rule == "dense" else s_star
    if not 0 <= k <= d:
        raise ValueError("s_star must lie in [0, d]")
    beta = np.zeros(d)
    idx = np.sort(rng.choice(d, size=k, replace=False))
    beta[idx] = rng.uniform(0.5, 1.0, size=k) * rng.choice([-1.0, 1.0], size=k)
    return beta


def noise_scales(base: float, size: int, rng, log_sd: float = 0.5, clip=(0.25, 4.0)) -> np.ndarray:
    """``base * LogNormal(0, log_sd)``, clipped to ``[clip] * base``, rescaled to mean ``base``."""
    if base == 0:
        return np.zeros(size)
    s = base * np.exp(rng.normal(0.0, log_sd, size=size))
    s = np.clip(s, clip[0] * base, clip[1] * base)
    return s * (base / s.mean())


def _structure_rng(spec: GeneratorSpec, rng):
    if spec.structure_seed is None:
        return rng
    return np.random.default_rng(spec.structure_seed)


def _draw_beta(spec, srng):
    if spec.beta_star is not None:
        return np.asarray(spec.beta_star, dtype=float)
    return gen_beta(spec.beta_rule, spec.d, spec.s_star, srng)


def _first_stage(spec, srng, rows: int):
    """``(M, A)``: environment means (categorical) or ``Pi`` (continuous)."""
    if spec.setting == "S3":
        A = srng.standard_normal((spec.d, spec.k))
        Z = srng.standard_normal((rows, spec.k))
        return spec.pi_scale * (Z @ A.T), A
    return srng.standard_normal((rows, spec.d)), None


def _rng(spec, rng):
    if rng is None:
        return np.random.default_rng(spec.seed)
    return np.random.default_rng(rng)


def gen_categorical(spec: GeneratorSpec, rng=None, shadow: bool = False):
    """One-hot dataset and its ground truth.

    Environments hold exactly ``r`` (``r~``) rows when ``spec.balanced``;
    otherwise every row draws its environment uniformly at random.
    """
    if spec.kind != "categorical":
        raise ValueError("gen_categorical needs a categorical spec")
    rng = _rng(spec, rng)
    srng = _structure_rng(spec, rng)
    m, d = spec.m, spec.d
    beta = _draw_beta(spec, srng)
    mu, A = _first_stage(spec, srng, m)
    sx = noise_scales(spec.sigma_x, m, srng, spec.scale_log_sd, spec.scale_clip)
    se = noise_scales(spec.sigma_eps, m, srng, spec.scale_log_sd, spec.scale_clip)

    def covariates(labels):
        u = rng.normal(0.0, spec.sigma_u, size=len(labels)) if spec.sigma_u > 0 else np.zeros(len(labels))
        eps = rng.standard_normal((len(labels), d)) * sx[labels, None]
        return mu[labels] + spec.gamma_x * u[:, None] + eps, u

    if spec.balanced:
        z_y = np.repeat(np.arange(m), int(spec.r))
        z_x = np.repeat(np.arange(m), int(spec.r_tilde))
    else:
        z_y = rng.integers(0, m, size=spec.n)
        z_x = rng.integers(0, m, size=spec.n_tilde)
    x_lat, u = covariates(z_y)
    y = x_lat @ beta + spec.gamma_y * u + rng.standard_normal(len(z_y)) * se[z_y]
    x, _ = covariates(z_x)
    ds = UnpairedDataset(z_y, y, z_x, x, InstrumentKind.ONEHOT, m)
    truth = GroundTruth(beta, tuple(int(j) for j in np.flatnonzero(beta)), mu=mu, A=A,
                        sigma_x_env=sx, sigma_eps_env=se, shadow_x=x_lat if shadow else None)
    return ds, truth


def gen_continuous(spec: GeneratorSpec, rng=None, shadow: bool = False):
    """Gaussian-instrument dataset with dominant-coordinate heteroskedasticity."""
    if spec.kind != "continuous":
        raise ValueError("gen_continuous needs a continuous spec")
    rng = _rng(spec, rng)
    srng = _structure_rng(spec, rng)
    m, d = spec.m, spec.d
    beta = _draw_beta(spec, srng)
    pi, A = _first_stage(spec, srng, m)
    sx = noise_scales(spec.sigma_x, m, srng, spec.scale_log_sd, spec.scale_clip)
    se = noise_scales(spec.sigma_eps, m, srng, spec.scale_log_sd, spec.scale_clip)

    def covariates(n):
        z = rng.standard_normal((n, m)) / np.sqrt(m)
        dom = np.abs(z).argmax(1)
        u = rng.normal(0.0, spec.sigma_u, size=n) if spec.sigma_u > 0 else np.zeros(n)
        eps = rng.standard_normal((n, d)) * sx[dom, None]
        return z, z @ pi + spec.gamma_x * u[:, None] + eps, u, dom

    z_y, x_lat, u, dom = covariates(spec.n)
    y = x_lat @ beta + spec.gamma_y * u + rng.standard_normal(spec.n) * se[dom]
    z_x, x, _, _ = covariates(spec.n_tilde)
    ds = UnpairedDataset(z_y, y, z_x, x, InstrumentKind.CONTINUOUS, m)
    truth = GroundTruth(beta, tuple(int(j) for j in np.flatnonzero(beta)), pi=pi, A=A,
                        sigma_x_env=sx, sigma_eps_env=se, shadow_x=x_lat if shadow else None)
    return ds, truth


def generate(spec: GeneratorSpec, rng=None, shadow: bool = False):
    if spec.kind == "categorical":
        return gen_categorical(spec, rng, shadow)
    return gen_continuous(spec, rng, shadow)


# ---------------------------------------------------------------------------
# columnar export


def write_dataset_csv(ds: UnpairedDataset, path) -> None:
    """One row per observation; ``role`` is ``y`` or ``x`` and the unobserved side is left empty.

    One-hot instruments are written as a single ``env`` label column. A
    leading comment line records the instrument kind and ``m``.
    """
    onehot = ds.kind is InstrumentKind.ONEHOT
    zcols = ["env"] if onehot else [f"z_{i}" for i in range(ds.m)]
    xcols = [f"x_{t}" for t in range(ds.d)]
    fmt = "{:.17g}".format
    with open(path, "w", newline="") as fh:
        fh.write(f"# kind={ds.kind.value} m={ds.m} d={ds.d}\n")
        w = csv.writer(fh)
        w.writerow(["role", *zcols, "y", *xcols])
        for i in range(ds.n):
            z = [str(int(ds.z_y[i]))] if onehot else [fmt(v) for v in ds.z_y[i]]
            w.writerow(["y", *z, fmt(ds.y[i]), *[""] * ds.d])
        for j in range(ds.n_tilde):
            z = [str(int(ds.z_x[j]))] if onehot else [fmt(v) for v in ds.z_x[j]]
            w.writerow(["x", *z, "", *[fmt(v) for v in ds.x[j]]])


def read_dataset_csv(path) -> UnpairedDataset:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError("missing dataset header comment")
        meta = dict(item.split("=", 1) for item in first[1:].split())
        kind = InstrumentKind(meta["kind"])
        m = int(meta["m"])
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    yi = header.index("y")
    xs = [i for i, h in enumerate(header) if h.startswith("x_")]
    zs = list(range(1, yi))
    ys = [r for r in body if r[0] == "y"]
    xr = [r for r in body if r[0] == "x"]
    if len(ys) + len(xr) != len(body):
        raise ValueError("role must be 'y' or 'x'")
    if kind is InstrumentKind.ONEHOT:
        z_y = np.array([int(r[zs[0]]) for r in ys], dtype=np.int64)
        z_x = np.array([int(r[zs[0]]) for r in xr], dtype=np.int64)
    else:
        z_y = np.array([[float(r[i]) for i in zs] for r in ys]).reshape(len(ys), m)
        z_x = np.array([[float(r[i]) for i in zs] for r in xr]).reshape(len(xr), m)
    y = np.array([float(r[yi]) for r in ys])
    x = np.array([[float(r[i]) for i in xs] for r in xr]).reshape(len(xr), len(xs))
    return UnpairedDataset(z_y, y, z_x, x, kind, m)


def write_truth_json(truth: GroundTruth, path) -> None:
    Path(path).write_text(json.dumps(truth.to_dict()))
