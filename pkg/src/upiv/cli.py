"""Command-line entry point: ``upiv <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import datagen, experiments
from .estimators import ESTIMATORS, EstimatorConfig, estimate
from .identifiability import (
    ENUM_MAX_D,
    RNS_MAX_D,
    dense_identifiable,
    numerical_rank,
    restricted_nullspace_holds,
)


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes")
    p.add_argument("--config", default=argparse.SUPPRESS, help="YAML/JSON config file")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="upiv", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="simulate a dataset from a generator spec")
    g.add_argument("--preset", choices=datagen.SETTINGS, help="start from a setting preset")
    g.add_argument("--kind", choices=datagen.KINDS)
    for name in ("m", "d", "s-star", "k", "r", "r-tilde"):
        g.add_argument(f"--{name}", type=int)

    e = sub.add_parser("estimate", parents=[common], help="run one estimator on a dataset file")
    e.add_argument("--data", required=True, help="dataset CSV written by 'generate'")
    e.add_argument("--method", default="up_gmm", choices=sorted(ESTIMATORS))
    e.add_argument("--ci-level", type=float)
    e.add_argument("--l1", action="store_true")
    e.add_argument("--post-refit", action="store_true")
    e.add_argument("--optimal-weight", action="store_true")
    e.add_argument("--beta-min", type=float)

    i = sub.add_parser("identify", parents=[common], help="identifiability report")
    i.add_argument("--matrix", help="first-stage matrix (.npy, or .csv/.txt of numbers)")
    i.add_argument("--s-star", type=int)

    b = sub.add_parser("benchmark", parents=[common], help="run an experiment plan")
    b.add_argument("--preset", choices=experiments.PRESETS)
    b.add_argument("--scale", choices=("acceptance", "full"), default="acceptance")
    b.add_argument("--replications", type=int)
    b.add_argument("--timing", action="store_true", help="record wall times in the CSV")

    a = sub.add_parser("agree", parents=[common], help="Monte-Carlo vs closed-form denominator agreement")
    a.add_argument("--preset", choices=experiments.PRESETS, default="agreement")
    a.add_argument("--scale", choices=("acceptance", "full"), default="acceptance")
    a.add_argument("--replications", type=int)
    a.add_argument("--K", type=int, default=2)
    a.add_argument("--H", type=int, default=10)
    return parser


def _opt(args, name, default=None):
    return getattr(args, name, default)


def _load_mapping(path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def _emit(text: str, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# subcommands; each returns a zero-argument runner after validating its inputs


def _generate(args):
    cfg = _opt(args, "config")
    data = _load_mapping(cfg) if cfg else {}
    if args.preset:
        data.setdefault("preset", args.preset)
    if args.kind:
        data["kind"] = args.kind
    for name in ("m", "d", "s_star", "k", "r", "r_tilde"):
        if getattr(args, name) is not None:
            data[name] = getattr(args, name)
    if _opt(args, "seed") is not None:
        data["seed"] = args.seed
    if "preset" not in data and "setting" not in data:
        raise ConfigError("generate needs --config or --preset")
    try:
        spec = datagen.GeneratorSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(_opt(args, "out", "."))

    def run():
        out.mkdir(parents=True, exist_ok=True)
        ds, truth = datagen.generate(spec)
        datagen.write_dataset_csv(ds, out / "dataset.csv")
        datagen.write_truth_json(truth, out / "truth.json")
        datagen.save_spec(spec, out / "spec.yaml")
        print(f"wrote {out / 'dataset.csv'} (n={ds.n}, n_tilde={ds.n_tilde}, m={ds.m}, d={ds.d})")
    return run


def _estimate(args):
    data = _load_mapping(args.config) if _opt(args, "config") else {}
    flags = {"l1": args.l1, "post_refit": args.post_refit, "optimal_weight": args.optimal_weight}
    data.update({k: True for k, v in flags.items() if v})
    if args.ci_level is not None:
        data["ci_level"] = args.ci_level
    if args.beta_min is not None:
        data["beta_min"] = args.beta_min
    try:
        cfg = EstimatorConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not Path(args.data).exists():
        raise ConfigError(f"dataset not found: {args.data}")

    def run():
        ds = datagen.read_dataset_csv(args.data)
        est = estimate(args.method, ds, cfg, np.random.default_rng(_opt(args, "seed")))
        out = est.to_dict()
        out["diagnostics"].pop("lambda_table", None)
        out["diagnostics"].pop("variance", None)
        out["method"] = args.method
        _emit(json.dumps(out, indent=2) + "\n", _opt(args, "out"))
    return run


def _read_matrix(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"matrix file not found: {path}")
    try:
        if p.suffix == ".npy":
            return np.atleast_2d(np.load(p))
        return np.atleast_2d(np.loadtxt(p, delimiter="," if p.suffix == ".csv" else None))
    except ValueError as exc:
        raise ConfigError(f"cannot read matrix {path}: {exc}") from exc


def _identify(args):
    if args.matrix:
        c = _read_matrix(args.matrix)
        s_star = 1 if args.s_star is None else args.s_star
        spec = None
    elif _opt(args, "config"):
        try:
            spec = datagen.GeneratorSpec.from_dict(_load_mapping(args.config))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if _opt(args, "seed") is not None:
            spec = spec.with_(seed=args.seed)
        s_star = spec.s_star if args.s_star is None else args.s_star
        c = None
    else:
        raise ConfigError("identify needs --matrix or --config")

    def run():
        cm = c
        if cm is None:
            _, truth = datagen.generate(spec.with_(r=1, r_tilde=1))
            cm = truth.first_stage_cov()
        m, d = cm.shape
        rank = numerical_rank(cm)
        report = {"m": m, "d": d, "rank": rank, "s_star": s_star,
                  "dense_identifiable": dense_identifiable(cm)}
        lines = [f"dense-identifiable: {str(report['dense_identifiable']).lower()} (rank {rank} of d={d})"]
        if d <= RNS_MAX_D:
            ok = restricted_nullspace_holds(cm, s_star)
            report["sparse_identifiable"] = ok
            lines.append(f"sparse-identifiable: {str(ok).lower()} (s*={s_star})")
        else:
            report["sparse_identifiable"] = None
            lines.append(f"sparse-identifiable: not checked (d={d} exceeds the enumeration "
                         f"budget {RNS_MAX_D}; sparsest-solution oracle budget {ENUM_MAX_D})")
        print("\n".join(lines))
        if _opt(args, "out"):
            Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return run


def _plan_from_args(args, default_preset=None) -> experiments.ExperimentPlan:
    try:
        if _opt(args, "config"):
            plan = experiments.ExperimentPlan.from_dict(_load_mapping(args.config))
        elif args.preset or default_preset:
            plan = experiments.preset_plan(args.preset or default_preset, args.scale)
        else:
            raise ConfigError("benchmark needs --config or --preset")
        if _opt(args, "seed") is not None:
            plan = replace(plan, master_seed=args.seed)
        if args.replications is not None:
            plan = replace(plan, replications=args.replications)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return plan


def _benchmark(args):
    plan = _plan_from_args(args)
    threads = _opt(args, "threads", 1)
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    out = Path(_opt(args, "out", "."))

    def run():
        rows = experiments.run_plan(plan, threads)
        summary = experiments.summarize(rows)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(experiments.rows_to_csv(rows, args.timing or plan.record_timing))
        (out / "summary.csv").write_text(experiments.summary_to_csv(summary))
        failed = sum(r.error is not None for r in rows)
        sys.stdout.write(experiments.summary_to_csv(summary))
        if failed:
            print(f"{failed} replication(s) failed; see the error counts above", file=sys.stderr)
    return run


def _agree(args):
    plan = _plan_from_args(args, "agreement")

    def run():
        rep = experiments.agreement(plan, K=args.K, H=args.H)
        text = json.dumps(rep.to_dict(), indent=2) + "\n"
        _emit(text, _opt(args, "out"))
        if _opt(args, "out"):
            sys.stdout.write(text)
    return run


COMMANDS = {"generate": _generate, "estimate": _estimate, "identify": _identify,
            "benchmark": _benchmark, "agree": _agree}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("missing subcommand; choose from " + ", ".join(COMMANDS))
        run = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        run()
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
