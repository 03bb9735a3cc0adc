"""Command-line front end: simulate | estimate | mc | bench.

Configuration comes from an optional ``key = value`` file (``--config``)
with flag overrides; every command validates its configuration against
a schema before computing.  Numeric outputs are CSV files written with
shortest round-trip floats, so a command rerun with the same
configuration and seed is byte-identical; timestamps go to a
``run_meta.json`` sidecar.  Exit codes: 0 success, 2 validation error,
3 numerical failure.
"""

from __future__ import annotations

import os

# Pin BLAS threading before numpy loads: keeps benchmark timings honest
# and makes results independent of the worker count.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import inference, io, rng as rngmod
from .errors import NumericalError, ValidationError
from .estimators import EstimatorConfig, benchmark, estimate_iv, estimate_ols, iterate_newton
from .model import SarDataset, draw_errors, simulate_given_errors
from .montecarlo import default_design, design_names, run as mc_run
from .weights import build_distance_rings, load_weight_set, save_weight_set

SCHEMAS = {
    "simulate": {
        "design": "str", "n": "int", "p": "int", "seed": "int",
        "error_dist": "str", "out": "str",
    },
    "estimate": {
        "y_path": "str", "x_path": "str", "weights_manifest": "str",
        "distances_path": "str", "rings_p": "int",
        "estimator": "str", "steps": "int", "regime": "str", "out": "str",
    },
    "mc": {
        "design": "str", "n": "int", "p": "int", "reps": "int", "seed": "int",
        "error_dist": "str", "workers": "int", "out": "str", "pmle": "bool",
    },
    "bench": {
        "design": "str", "n": "int", "p": "int", "seed": "int",
        "methods": "str", "repetitions": "int", "out": "str",
    },
}

_FLAG_KEYS = (
    "design", "n", "p", "reps", "seed", "estimator", "steps",
    "regime", "workers", "out",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sarnewton",
        description="Closed-form and Newton-step estimation of higher-order "
        "spatial autoregressions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in SCHEMAS:
        p = sub.add_parser(command)
        p.add_argument("--config", type=str, default=None, help="key = value config file")
        p.add_argument("--design", type=str, help=f"design name, e.g. {design_names()[0]}")
        p.add_argument("--n", type=int, help="sample size")
        p.add_argument("--p", type=int, help="number of spatial lag matrices")
        p.add_argument("--reps", type=int, help="Monte Carlo replications")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--estimator", choices=("iv", "ols"), help="initial estimator")
        p.add_argument("--steps", type=int, help="Newton iterations")
        p.add_argument("--regime", choices=("divergent", "bounded"), help="covariance regime")
        p.add_argument("--workers", type=int, help="parallel workers (mc only)")
        p.add_argument("--out", type=str, help="output directory")
    return parser


def merge_config(args: argparse.Namespace) -> dict:
    raw = io.parse_config_file(args.config) if args.config else {}
    config = io.coerce_config(raw, SCHEMAS[args.command], args.command)
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            if key not in SCHEMAS[args.command]:
                raise ValidationError(f"flag --{key} does not apply to {args.command!r}")
            config[key] = value
    config.setdefault("seed", 0)
    config.setdefault("out", "out")
    return config


def _resolve_design_name(config: dict) -> str:
    name = config.get("design")
    if name is None:
        raise ValidationError("a --design name is required")
    if "p" in config:
        family = name.rsplit("_p", 1)[0]
        name = f"{family}_p{config['p']}"
    return name


def _design_from_config(config: dict, reps: int = 1):
    return default_design(
        _resolve_design_name(config),
        n=config.get("n", 400),
        reps=reps,
        master_seed=config["seed"],
        error_dist=config.get("error_dist"),
        include_pmle=config.get("pmle", False),
    )


def _draw_design_dataset(design) -> SarDataset:
    """One replication (index 0) of a design, used by simulate and bench."""
    weights = design.build_weights()
    x_rng = rngmod.stream(design.master_seed, 0, rngmod.PURPOSE_X)
    X = x_rng.uniform(0.0, 1.0, size=(design.n, design.k))
    u_rng = rngmod.stream(design.master_seed, 0, rngmod.PURPOSE_ERRORS)
    u = draw_errors(design.error_dist, design.n, u_rng, X=X)
    y = simulate_given_errors(
        weights, X, np.array(design.true_beta), np.array(design.true_lam), u
    )
    return SarDataset(y=y, X=X, weights=weights)


def cmd_simulate(config: dict) -> int:
    t0 = time.perf_counter()
    design = _design_from_config(config)
    dataset = _draw_design_dataset(design)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    io.write_vector_csv(out / "y.csv", dataset.y, header="y")
    io.write_matrix_csv(out / "X.csv", dataset.X)
    save_weight_set(dataset.weights, out)
    (out / "dataset.cfg").write_text(
        "y_path = y.csv\nx_path = X.csv\nweights_manifest = weights_manifest.txt\n"
    )
    io.write_provenance(out, "simulate", config, config["seed"])
    io.write_run_meta(out, time.perf_counter() - t0)
    print(f"simulate: wrote dataset for {design.design} (n={design.n}, p={design.p}) to {out}")
    return 0


def _load_dataset(config: dict) -> SarDataset:
    base = Path(config.get("_config_dir", "."))
    for key in ("y_path", "x_path"):
        if key not in config:
            raise ValidationError(f"estimate needs {key!r} in the config file")
    y = io.read_vector_csv(base / config["y_path"])
    X = io.read_matrix_csv(base / config["x_path"])
    has_manifest = "weights_manifest" in config
    has_distances = "distances_path" in config
    if has_manifest == has_distances:
        raise ValidationError(
            "estimate needs exactly one of weights_manifest or distances_path"
        )
    if has_manifest:
        weights = load_weight_set(base / config["weights_manifest"])
    else:
        # distance-band rings: one matrix per sequential 1-mile ring
        if "rings_p" not in config:
            raise ValidationError("distances_path requires rings_p")
        distances = io.read_matrix_csv(base / config["distances_path"])
        weights = build_distance_rings(distances, p=config["rings_p"])
    return SarDataset(y=y, X=X, weights=weights)


def _write_iterates(out: Path, report, p: int, k: int) -> None:
    header = (
        ["step"]
        + [f"lambda_{i + 1}" for i in range(p)]
        + [f"beta_{j + 1}" for j in range(k)]
        + ["sigma2", "step_norm", "neg2_loglik"]
    )
    lines = [",".join(header)]
    for s, rec in enumerate(report.iterates):
        cells = [str(s)]
        cells += [io.fmt(v) for v in rec.theta.stacked()]
        cells += [io.fmt(rec.sigma2), io.fmt(rec.step_norm), io.fmt(rec.neg2_loglik)]
        lines.append(",".join(cells))
    (out / "iterates.csv").write_text("\n".join(lines) + "\n")


def cmd_estimate(config: dict) -> int:
    t0 = time.perf_counter()
    dataset = _load_dataset(config)
    initial_kind = config.get("estimator", "iv")
    steps = config.get("steps", 3)
    regime = config.get("regime", "bounded")
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)

    initial = estimate_iv(dataset) if initial_kind == "iv" else estimate_ols(dataset)
    newton = iterate_newton(
        dataset, EstimatorConfig(initial=initial_kind, newton_steps=steps)
    )
    _write_iterates(out, newton, dataset.p, dataset.k)
    if newton.failed_at is not None:
        (out / "summary.txt").write_text(
            f"estimation failed at Newton step {newton.failed_at}: "
            f"{newton.failure_reason}\nsee iterates.csv for the trace\n"
        )
        raise NumericalError(
            f"Newton step {newton.failed_at} failed: {newton.failure_reason}"
        )

    cov_fn = (
        inference.covariance_divergent
        if regime == "divergent"
        else inference.covariance_bounded
    )
    cov_initial = cov_fn(dataset, initial)
    cov_newton = cov_fn(dataset, newton)
    t_initial = inference.t_statistics(initial, cov_initial)
    t_newton = inference.t_statistics(newton, cov_newton)
    ratio = inference.se_ratio(cov_initial, cov_newton)

    names = [f"lambda_{i + 1}" for i in range(dataset.p)] + [
        f"beta_{j + 1}" for j in range(dataset.k)
    ]
    header = (
        f"parameter,{initial_kind},{initial_kind}_se,{initial_kind}_t,"
        "newton,newton_se,newton_t,se_ratio"
    )
    lines = [header]
    th0, th1 = initial.theta_hat.stacked(), newton.theta_hat.stacked()
    for i, name in enumerate(names):
        lines.append(
            ",".join(
                [
                    name,
                    io.fmt(th0[i]),
                    io.fmt(cov_initial.se[i]),
                    io.fmt(t_initial[i]),
                    io.fmt(th1[i]),
                    io.fmt(cov_newton.se[i]),
                    io.fmt(t_newton[i]),
                    io.fmt(ratio[i]),
                ]
            )
        )
    (out / "estimates.csv").write_text("\n".join(lines) + "\n")

    h_scale = ", ".join(io.fmt(v) for v in dataset.weights.h_scale)
    summary = [
        f"initial estimator = {initial_kind}",
        f"newton steps = {steps}",
        f"covariance regime = {regime}",
        f"h_scale diagnostic per matrix = ({h_scale})",
        f"sigma2 ({initial_kind}) = {io.fmt(initial.sigma2_hat)}",
        f"sigma2 (newton) = {io.fmt(newton.sigma2_hat)}",
        f"converged = {newton.converged}",
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    io.write_provenance(out, "estimate", config, config.get("seed"))
    io.write_run_meta(out, time.perf_counter() - t0)
    print(f"estimate: wrote {out / 'estimates.csv'}")
    return 0


def cmd_mc(config: dict) -> int:
    t0 = time.perf_counter()
    reps = config.get("reps", 1000)
    design = _design_from_config(config, reps=reps)
    workers = config.get("workers", os.cpu_count() or 1)
    result = mc_run(design, workers=workers)
    out = Path(config["out"])
    written = io.write_mc_tables(result, out)
    io.write_provenance(out, "mc", config, config["seed"])
    io.write_run_meta(out, time.perf_counter() - t0)
    print(f"mc: wrote {', '.join(str(p) for p in written.values())}")
    return 0


def cmd_bench(config: dict) -> int:
    t0 = time.perf_counter()
    design = _design_from_config(config)
    dataset = _draw_design_dataset(design)
    methods = [m.strip() for m in config.get("methods", "iv,ols,newton1,newton3,pmle").split(",")]
    rows = benchmark(dataset, methods, repetitions=config.get("repetitions", 3))
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    header = [
        "method", "n", "p", "repetitions", "median_s", "min_s",
        "hessian_builds", "objective_evaluations",
    ]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(io.fmt(row[h]) if isinstance(row[h], float) else str(row[h])
                              for h in header))
    (out / "timings.csv").write_text("\n".join(lines) + "\n")
    env = {var: os.environ.get(var) for var in
           ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}
    (out / "bench_meta.json").write_text(
        json.dumps({"thread_env": env, "single_threaded": all(v == "1" for v in env.values())},
                   indent=2, sort_keys=True) + "\n"
    )
    io.write_provenance(out, "bench", config, config["seed"])
    io.write_run_meta(out, time.perf_counter() - t0)
    print(f"bench: wrote {out / 'timings.csv'}")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "mc": cmd_mc,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = merge_config(args)
        if args.config:
            config["_config_dir"] = str(Path(args.config).parent)
        return _COMMANDS[args.command](config)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
