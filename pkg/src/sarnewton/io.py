"""File formats, configuration parsing, and provenance records.

All numeric output uses the shortest decimal representation that round
trips to the same float (Python's ``repr``), so parse-format-parse is
the identity and command outputs are byte-deterministic.  Timestamps
never enter data files; they live in a ``run_meta.json`` sidecar so that
reruns with the same configuration and seed are byte-identical.

Configuration files are plain ``key = value`` text with ``#`` comments.
Every command validates its configuration against a schema before any
computation: unknown or misspelled keys fail fast.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .montecarlo import McRunResult, McTable

__all__ = [
    "fmt",
    "write_vector_csv",
    "read_vector_csv",
    "write_matrix_csv",
    "read_matrix_csv",
    "write_mc_tables",
    "parse_config_file",
    "coerce_config",
    "write_provenance",
    "write_run_meta",
]


def fmt(x) -> str:
    """Shortest round-trip decimal representation of a number."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_vector_csv(path: Path, v: np.ndarray, header: str | None = None) -> None:
    lines = [header] if header else []
    lines += [fmt(x) for x in np.asarray(v).ravel()]
    path.write_text("\n".join(lines) + "\n")


def read_vector_csv(path: Path) -> np.ndarray:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    start = 1 if lines and not _is_number(lines[0].split(",")[0]) else 0
    return np.array([float(ln) for ln in lines[start:]])


def write_matrix_csv(path: Path, m: np.ndarray, header: list[str] | None = None) -> None:
    lines = [",".join(header)] if header else []
    for row in np.atleast_2d(np.asarray(m)):
        lines.append(",".join(fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


def read_matrix_csv(path: Path) -> np.ndarray:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ConfigError(f"{path}: empty matrix file")
    start = 1 if not _is_number(lines[0].split(",")[0]) else 0
    return np.array([[float(x) for x in ln.split(",")] for ln in lines[start:]])


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def _table_lines(table: McTable, n: int) -> list[str]:
    header = ["parameter"] + [f"n{n}:{c}" for c in table.col_names]
    lines = [",".join(header)]
    for i, name in enumerate(table.row_names):
        cells = [name] + [fmt(table.values[i, j]) for j in range(len(table.col_names))]
        lines.append(",".join(cells))
    return lines


def write_mc_tables(result: McRunResult, out_dir: str | Path) -> dict[str, Path]:
    """Write one CSV per statistic plus failure counts, raw estimates,
    and a structured-text summary.

    Layout: parameters as rows, estimator /
    iteration columns (prefixed with the sample size).  Column order is
    the design's estimator order: initial estimators in configured
    order, each followed by its Newton iterates, then the reference PMLE
    when enabled.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    design = result.design
    written: dict[str, Path] = {}
    for table in result.tables():
        path = out / f"{table.statistic}.csv"
        path.write_text("\n".join(_table_lines(table, design.n)) + "\n")
        written[table.statistic] = path

    labels = design.labels()
    fail_lines = ["estimator,failed_reps,reps"]
    for label in labels:
        fail_lines.append(f"{label},{result.failed_reps[label]},{design.reps}")
    fail_path = out / "failed_reps.csv"
    fail_path.write_text("\n".join(fail_lines) + "\n")
    written["failed_reps"] = fail_path

    raw_header = ["rep"] + [
        f"{label}:{pname}" for label in labels for pname in design.parameter_names()
    ]
    raw_lines = [",".join(raw_header)]
    for r in range(design.reps):
        cells = [str(r)]
        for label in labels:
            cells += [fmt(v) for v in result.estimates[label][r]]
        raw_lines.append(",".join(cells))
    raw_path = out / "raw_estimates.csv"
    raw_path.write_text("\n".join(raw_lines) + "\n")
    written["raw_estimates"] = raw_path

    written["summary"] = _write_mc_summary(result, out)
    return written


def _write_mc_summary(result: McRunResult, out: Path) -> Path:
    design = result.design
    lines = [
        "Monte Carlo summary",
        f"design = {design.design}",
        f"n = {design.n}",
        f"p = {design.p}",
        f"error_dist = {design.error_dist}",
        f"reps = {design.reps}",
        f"master_seed = {design.master_seed}",
        f"true_lam = ({', '.join(fmt(v) for v in design.true_lam)})",
        f"true_beta = ({', '.join(fmt(v) for v in design.true_beta)})",
        "h_scale = (" + ", ".join(fmt(v) for v in result.weights.h_scale) + ")",
        "",
        "failed replications per estimator:",
    ]
    for label in design.labels():
        lines.append(f"  {label}: {result.failed_reps[label]} / {design.reps}")
    for table in result.tables():
        lines.append("")
        lines.append(f"[{table.statistic}]")
        width = max((len(c) for c in table.col_names), default=8) + 2
        lines.append(" " * 12 + "".join(c.rjust(width) for c in table.col_names))
        for i, name in enumerate(table.row_names):
            row = "".join(f"{table.values[i, j]:.4f}".rjust(width)
                          for j in range(len(table.col_names)))
            lines.append(name.ljust(12) + row)
    path = out / "summary.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


# -- configuration ----------------------------------------------------------


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a ``key = value`` configuration file."""
    out: dict[str, str] = {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{p}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


_COERCERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": lambda s: {"true": True, "false": False}[str(s).strip().lower()],
}


def coerce_config(raw: dict[str, str], schema: dict[str, str], command: str) -> dict:
    """Validate raw key/value pairs against a per-command schema.

    ``schema`` maps known keys to type names (int, float, str, bool).
    Unknown keys are rejected before any computation happens.
    """
    out = {}
    for key, value in raw.items():
        if key not in schema:
            known = ", ".join(sorted(schema))
            raise ConfigError(f"unknown key {key!r} for command {command!r} (known: {known})")
        try:
            out[key] = _COERCERS[schema[key]](value)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({schema[key]})") from exc
    return out


# -- provenance ---------------------------------------------------------------


def write_provenance(out_dir: Path, command: str, config: dict, seed: int | None) -> Path:
    """Deterministic provenance record: inputs, seed, versions."""
    import scipy

    from . import __version__

    record = {
        "command": command,
        "config": {k: config[k] for k in sorted(config)},
        "seed": seed,
        "versions": {
            "sarnewton": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
    }
    path = Path(out_dir) / "provenance.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


def write_run_meta(out_dir: Path, wall_seconds: float) -> Path:
    """Timestamp sidecar; the only non-deterministic output file."""
    meta = {
        "completed_unix": time.time(),
        "wall_seconds": wall_seconds,
    }
    path = Path(out_dir) / "run_meta.json"
    path.write_text(json.dumps(meta, indent=2) + "\n")
    return path
