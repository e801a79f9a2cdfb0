"""Seeded experiment runner: grid points x estimators x replications -> result rows.

Child seeds come from ``numpy.random.SeedSequence(master_seed,
spawn_key=key)`` with

* data noise:      ``(0, grid_index, rep)``
* structure:       ``(1, rep)``, or ``(1,)`` when the structure is shared by all reps
* estimator:       ``(2, grid_index, estimator_index, rep)``

so results do not depend on execution order or thread count.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .datagen import GeneratorSpec, generate
from .estimators import ESTIMATORS, EstimatorConfig, estimate
from .identifiability import population_q_b, tsiv_plateau

CSV_HEADER = ("preset", "estimator", "m", "n", "n_tilde", "ratio", "rep", "seed", "mae",
              "support_precision", "support_recall", "coverage", "wall_ms")

DATA, STRUCTURE, ESTIMATOR = 0, 1, 2


def child_seed(master_seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    method: str
    config: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self):
        if self.method not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.method!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "method": self.method, "config": _config_dict(self.config)}

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatorSpec":
        data = dict(data)
        method = data.pop("method", data.get("name"))
        name = data.pop("name", method)
        cfg = EstimatorConfig.from_dict(data.pop("config", {}) or {})
        if data:
            raise ValueError(f"unknown estimator entry keys: {sorted(data)}")
        return cls(name, method, cfg)


def _config_dict(cfg: EstimatorConfig) -> dict:
    default = EstimatorConfig()
    return {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in cfg.to_dict().items() if v != getattr(default, k)}


@dataclass(frozen=True)
class GridPoint:
    m: int
    r: int
    r_tilde: int | None = None

    def to_dict(self) -> dict:
        return {"m": self.m, "r": self.r, "r_tilde": self.r_tilde}


@dataclass
class ExperimentPlan:
    """A sweep of generator grid points evaluated by several estimators.

    ``structure="per_rep"`` draws ``beta*`` and the first stage once per
    replication and keeps them across the grid; ``"fixed"`` shares one
    draw across all replications as well.
    """

    preset: str
    generator: GeneratorSpec
    grid: list[GridPoint]
    estimators: list[EstimatorSpec]
    replications: int = 50
    master_seed: int = 0
    structure: str = "per_rep"
    ci_level: float | None = None
    record_timing: bool = False

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.grid:
            raise ValueError("grid must be nonempty")
        if not self.estimators:
            raise ValueError("need at least one estimator")
        if self.structure not in ("per_rep", "fixed"):
            raise ValueError("structure must be 'per_rep' or 'fixed'")
        names = [e.name for e in self.estimators]
        if len(set(names)) != len(names):
            raise ValueError("estimator names must be unique")

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "generator": self.generator.to_dict(),
            "grid": [g.to_dict() for g in self.grid],
            "estimators": [e.to_dict() for e in self.estimators],
            "replications": self.replications,
            "master_seed": self.master_seed,
            "structure": self.structure,
            "ci_level": self.ci_level,
            "record_timing": self.record_timing,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        data = dict(data)
        base = None
        if "base" in data:
            base = preset_plan(data.pop("base"), data.pop("scale", "acceptance"))
        if base is None and "generator" not in data:
            raise ValueError("plan needs a 'generator' section or a 'base' preset")
        gen = base.generator if base else None
        if "generator" in data:
            g = data.pop("generator")
            gen = gen.with_(**g) if gen is not None else GeneratorSpec.from_dict(g)
        grid = base.grid if base else None
        if "grid" in data:
            grid = [GridPoint(**g) for g in data.pop("grid")]
        ests = base.estimators if base else None
        if "estimators" in data:
            ests = [EstimatorSpec.from_dict(e) for e in data.pop("estimators")]
        kw = {} if base is None else {
            "preset": base.preset, "replications": base.replications,
            "master_seed": base.master_seed, "structure": base.structure,
            "ci_level": base.ci_level, "record_timing": base.record_timing}
        known = {"preset", "replications", "master_seed", "structure", "ci_level", "record_timing"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        kw.update(data)
        kw.setdefault("preset", "custom")
        return cls(generator=gen, grid=grid, estimators=ests, **kw)


def load_plan(path) -> ExperimentPlan:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError("plan config must be a mapping")
    return ExperimentPlan.from_dict(data)


@dataclass
class ResultRow:
    preset: str
    estimator: str
    m: int
    n: int
    n_tilde: int
    ratio: float
    rep: int
    seed: int
    mae: float
    support_precision: float | None = None
    support_recall: float | None = None
    coverage: float | None = None
    wall_ms: float = 0.0
    error: str | None = None
    grid_index: int = 0
    abs_error: np.ndarray | None = field(default=None, repr=False)
    beta_hat: np.ndarray | None = field(default=None, repr=False)
    beta_star: np.ndarray | None = field(default=None, repr=False)
    plateau: np.ndarray | None = field(default=None, repr=False)
    support: tuple | None = None
    true_support: tuple | None = None
    coverage_flags: np.ndarray | None = field(default=None, repr=False)

    def key(self):
        return (self.grid_index, self.estimator, self.rep)


# ---------------------------------------------------------------------------
# scoring


def support_metrics(selected, truth) -> tuple[float, float]:
    sel, tru = set(selected), set(truth)
    hit = len(sel & tru)
    precision = hit / len(sel) if sel else (1.0 if not tru else 0.0)
    recall = hit / len(tru) if tru else 1.0
    return precision, recall


def _coverage_flags(ci, beta_star, true_support):
    idx = list(true_support) if true_support else list(range(len(beta_star)))
    lo, hi = ci[idx, 0], ci[idx, 1]
    return (lo <= beta_star[idx]) & (beta_star[idx] <= hi)


def _task_spec(plan: ExperimentPlan, g: int, rep: int) -> GeneratorSpec:
    gp = plan.grid[g]
    skey = (STRUCTURE,) if plan.structure == "fixed" else (STRUCTURE, rep)
    return plan.generator.with_(
        m=gp.m, r=gp.r, r_tilde=gp.r if gp.r_tilde is None else gp.r_tilde,
        seed=child_seed(plan.master_seed, DATA, g, rep),
        structure_seed=child_seed(plan.master_seed, *skey))


def _plateau(spec: GeneratorSpec, truth):
    if spec.kind != "categorical":
        return None
    pq = population_q_b(truth, spec, "balanced" if spec.balanced else "iid")
    try:
        return tsiv_plateau(truth.beta_star, pq.q, pq.b_matrix, spec.r_tilde)
    except np.linalg.LinAlgError:
        return None


def _run_task(plan: ExperimentPlan, g: int, rep: int) -> list[ResultRow]:
    spec = _task_spec(plan, g, rep)
    ds, truth = generate(spec)
    plateau = _plateau(spec, truth)
    rows = []
    for e_idx, est in enumerate(plan.estimators):
        seed = child_seed(plan.master_seed, ESTIMATOR, g, e_idx, rep)
        cfg = est.config
        if plan.ci_level is not None and cfg.ci_level is None and est.method == "up_gmm":
            cfg = replace(cfg, ci_level=plan.ci_level)
        row = ResultRow(plan.preset, est.name, spec.m, ds.n, ds.n_tilde, ds.n / spec.m, rep, seed,
                        math.nan, grid_index=g, beta_star=truth.beta_star, plateau=plateau,
                        true_support=truth.support)
        t0 = time.perf_counter()
        try:
            res = estimate(est.method, ds, cfg, np.random.default_rng(seed))
        except Exception as exc:  # noqa: BLE001 - a failed replication is recorded, not fatal
            row.error = f"{type(exc).__name__}: {exc}"
            row.wall_ms = (time.perf_counter() - t0) * 1e3
            rows.append(row)
            continue
        row.wall_ms = (time.perf_counter() - t0) * 1e3
        row.beta_hat = res.beta
        row.abs_error = np.abs(res.beta - truth.beta_star)
        row.mae = float(row.abs_error.mean())
        if res.support is not None:
            row.support = res.support
            row.support_precision, row.support_recall = support_metrics(res.support, truth.support)
        if res.ci is not None:
            flags = _coverage_flags(res.ci, truth.beta_star, truth.support)
            row.coverage_flags = flags
            row.coverage = float(flags.mean())
        rows.append(row)
    return rows


def _run_chunk(args):
    plan, tasks = args
    out = []
    for g, rep in tasks:
        out.extend(_run_task(plan, g, rep))
    return out


def run_plan(plan: ExperimentPlan, threads: int = 1) -> list[ResultRow]:
    """Evaluate every (grid point, estimator, replication); rows sorted by that key."""
    tasks = [(g, rep) for g in range(len(plan.grid)) for rep in range(plan.replications)]
    if threads <= 1:
        rows = _run_chunk((plan, tasks))
    else:
        chunks = [tasks[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = [r for part in pool.map(_run_chunk, [(plan, c) for c in chunks]) for r in part]
    order = {e.name: i for i, e in enumerate(plan.estimators)}
    rows.sort(key=lambda r: (r.grid_index, order[r.estimator], r.rep))
    return rows


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: list[ResultRow], timing: bool = False) -> str:
    """CSV text with the fixed header. ``wall_ms`` is left empty unless ``timing``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.preset, r.estimator, r.m, r.n, r.n_tilde, _fmt(float(r.ratio)), r.rep, r.seed,
                    _fmt(r.mae), _fmt(r.support_precision), _fmt(r.support_recall),
                    _fmt(r.coverage), _fmt(round(r.wall_ms, 3)) if timing else ""])
    return buf.getvalue()


def summarize(rows: list[ResultRow]) -> list[dict]:
    """Per (preset, estimator, grid point): mean and standard error of mae, support and coverage means."""
    if not rows:
        raise ValueError("no rows to summarize")
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.preset, r.estimator, r.m, r.n, r.n_tilde), []).append(r)
    out = []
    for (preset, est, m, n, nt), grp in groups.items():
        ok = [r for r in grp if r.error is None]
        maes = np.array([r.mae for r in ok])
        rec = {"preset": preset, "estimator": est, "m": m, "n": n, "n_tilde": nt,
               "ratio": n / m, "reps": len(grp), "errors": len(grp) - len(ok),
               "mae_mean": float(maes.mean()) if len(maes) else math.nan,
               "mae_se": float(maes.std(ddof=1) / np.sqrt(len(maes))) if len(maes) > 1 else 0.0}
        for name in ("support_precision", "support_recall", "coverage"):
            vals = [getattr(r, name) for r in ok if getattr(r, name) is not None]
            rec[name] = float(np.mean(vals)) if vals else None
        out.append(rec)
    return out


SUMMARY_HEADER = ("preset", "estimator", "m", "n", "n_tilde", "ratio", "reps", "errors",
                  "mae_mean", "mae_se", "support_precision", "support_recall", "coverage")


def summary_to_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for rec in summary:
        w.writerow([_fmt(float(rec[k]) if isinstance(rec[k], (float, np.floating)) else rec[k])
                    for k in SUMMARY_HEADER])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Monte-Carlo vs closed-form denominator agreement


@dataclass
class AgreementReport:
    gaps: np.ndarray
    dropped: int
    trimmed_max: float
    margin: float

    @property
    def passed(self) -> bool:
        return self.trimmed_max <= self.margin

    def to_dict(self) -> dict:
        return {"points": int(self.gaps.size), "dropped": self.dropped,
                "trimmed_max_gap": self.trimmed_max, "margin": self.margin,
                "max_gap": float(self.gaps.max()) if self.gaps.size else 0.0,
                "passed": self.passed}


def agreement(plan: ExperimentPlan, K: int = 2, H: int = 10, trim: float = 0.001,
              margin: float = 0.025) -> AgreementReport:
    """Relative coefficient gaps ``|b_mc - b_an| / |b_an|`` of the cross-moment estimator.

    The ``ceil(trim * points)`` largest gaps are dropped before taking the max.
    """
    mc = EstimatorConfig(denominator="mc", K=K, H=H)
    an = EstimatorConfig(denominator="analytic")
    gaps = []
    for g in range(len(plan.grid)):
        for rep in range(plan.replications):
            ds, _ = generate(_task_spec(plan, g, rep))
            rng = np.random.default_rng(child_seed(plan.master_seed, ESTIMATOR, g, 0, rep))
            b_mc = estimate("up_gmm_hd", ds, mc, rng).beta
            b_an = estimate("up_gmm_hd", ds, an).beta
            gaps.extend(np.abs(b_mc - b_an) / np.abs(b_an))
    gaps = np.asarray(gaps)
    drop = math.ceil(trim * gaps.size)
    kept = np.sort(gaps)[: gaps.size - drop]
    return AgreementReport(gaps, drop, float(kept.max()) if kept.size else 0.0, margin)


# ---------------------------------------------------------------------------
# presets

_SPARSE_REFIT = dict(l1=True, post_refit=True, beta_min=0.5)


def _baselines():
    return [EstimatorSpec("ts_iv", "ts_iv"), EstimatorSpec("ts_2sls", "ts_2sls"),
            EstimatorSpec("naive_ols", "naive_ols")]


def preset_plan(name: str, scale: str = "acceptance") -> ExperimentPlan:
    """Named sweeps. ``scale="full"`` uses the full dimensions; ``"acceptance"`` a reduced version."""
    if scale not in ("acceptance", "full"):
        raise ValueError("scale must be 'acceptance' or 'full'")
    full = scale == "full"
    if name == "setting1":
        gen = GeneratorSpec.preset("S1") if full else GeneratorSpec.preset("S1", m=50, d=100, s_star=5)
        rs = [3, 6, 12, 25, 50, 100, 200]
        ests = _baselines() + [
            EstimatorSpec("up_gmm", "up_gmm", EstimatorConfig(**_SPARSE_REFIT)),
            EstimatorSpec("up_gmm_hd", "up_gmm_hd", EstimatorConfig(**_SPARSE_REFIT))]
        return ExperimentPlan("setting1", gen, [GridPoint(gen.m, r) for r in rs], ests)
    if name == "setting2":
        gen = GeneratorSpec.preset("S2")
        ms = [200, 400, 800, 1600] if full else [200, 400, 800]
        ests = _baselines() + [EstimatorSpec("up_gmm", "up_gmm"),
                               EstimatorSpec("up_gmm_hd", "up_gmm_hd")]
        grid = [GridPoint(m, r) for r in (2, 8, 32) for m in ms]
        return ExperimentPlan("setting2", gen, grid, ests)
    if name == "setting3":
        gen = GeneratorSpec.preset("S3") if full else GeneratorSpec.preset("S3", k=30, d=50, s_star=5)
        # weak first stage: unit variance per coordinate of mu_e, as in S1/S2
        gen = gen.with_(pi_scale=1 / np.sqrt(gen.k))
        ms = [50, 70, 100, 140, 200, 400, 800] if full else [25, 35, 50, 70, 100, 200, 400, 800]
        ests = _baselines() + [
            EstimatorSpec("up_gmm", "up_gmm", EstimatorConfig(**_SPARSE_REFIT)),
            EstimatorSpec("up_gmm_hd", "up_gmm_hd", EstimatorConfig(**_SPARSE_REFIT))]
        grid = [GridPoint(m, r) for r in (2, 8) for m in ms]
        return ExperimentPlan("setting3", gen, grid, ests)
    if name == "plugin_bias":
        gen = GeneratorSpec(kind="categorical", setting="S2", d=1, s_star=1, beta_rule="dense")
        grid = [GridPoint(m, 4) for m in (250, 500, 1000, 2000)]
        ests = [EstimatorSpec("ts_iv", "ts_iv"), EstimatorSpec("up_gmm_hd", "up_gmm_hd")]
        return ExperimentPlan("plugin_bias", gen, grid, ests, structure="fixed")
    if name == "coverage":
        gen = GeneratorSpec(kind="categorical", setting="S2", m=5, d=2, s_star=2, beta_rule="dense",
                            balanced=False)
        ests = [EstimatorSpec("up_gmm", "up_gmm", EstimatorConfig(optimal_weight=True))]
        return ExperimentPlan("coverage", gen, [GridPoint(5, 1000)], ests, replications=500,
                              structure="fixed", ci_level=0.95)
    if name == "coverage_sparse":
        gen = GeneratorSpec(kind="categorical", setting="S1", m=10, d=10, s_star=3, balanced=False)
        ests = [EstimatorSpec("up_gmm", "up_gmm",
                              EstimatorConfig(optimal_weight=True, **_SPARSE_REFIT))]
        return ExperimentPlan("coverage_sparse", gen, [GridPoint(10, 500)], ests,
                              replications=500, structure="fixed", ci_level=0.95)
    if name == "agreement":
        gen = GeneratorSpec.preset("S2")
        grid = [GridPoint(m, r) for r in (2, 8, 32) for m in ((200, 400, 800, 1600) if full else (400,))]
        return ExperimentPlan("agreement", gen, grid, [EstimatorSpec("up_gmm_hd", "up_gmm_hd")])
    raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")


PRESETS = ("setting1", "setting2", "setting3", "plugin_bias", "coverage", "coverage_sparse", "agreement")
