"""Shared fixtures.

The expensive Monte Carlo runs are session-scoped and shared between the
module tests and the acceptance suite; each uses its own fixed master
seed.  CLI-based runs go through a subprocess so that byte-determinism
checks exercise the real executable with its thread pinning.
"""

from __future__ import annotations

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sarnewton.estimators import benchmark
from sarnewton.model import SarDataset
from sarnewton.montecarlo import McDesign, default_design, run

N400_SEED = 20260811
DIVERGENT_SEED = 811
N800_SEED = 1797
T6_SEED = 606
PMLE_SEED = 77


def run_cli(args: list[str], cwd: Path) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "sarnewton.cli", *args],
        cwd=cwd,
        capture_output=True,
        text=True,
    )


def read_table(path: Path) -> dict:
    """Parse a statistic CSV into {column: {row: value}}."""
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    cols = [h.split(":", 1)[-1] for h in header[1:]]
    out = {c: {} for c in cols}
    for line in lines[1:]:
        cells = line.split(",")
        for c, cell in zip(cols, cells[1:]):
            out[c][cells[0]] = float(cell)
    return out


def read_raw_estimates(path: Path) -> dict[str, np.ndarray]:
    """Parse raw_estimates.csv into {'label:param': column array}."""
    lines = path.read_text().splitlines()
    header = lines[0].split(",")[1:]
    data = np.array([[float(x) for x in ln.split(",")[1:]] for ln in lines[1:]])
    return {name: data[:, j] for j, name in enumerate(header)}


@pytest.fixture(scope="session")
def mc_cli_bounded_n400(tmp_path_factory) -> dict:
    """Acceptance run 3: CLI, bounded p=2, n=400, 1000 reps, three times.

    Runs twice with workers=1 and once with workers=8 for the
    determinism criterion; the first run's outputs carry the table
    values used by the reproduction criteria.
    """
    base = tmp_path_factory.mktemp("cli_bounded_n400")
    dirs, times = [], []
    for tag, workers in (("a", 1), ("b", 1), ("c", 8)):
        out = base / tag
        import time

        t0 = time.perf_counter()
        proc = run_cli(
            [
                "mc", "--design", "bounded_p2", "--n", "400", "--reps", "1000",
                "--seed", str(N400_SEED), "--workers", str(workers), "--out", str(out),
            ],
            cwd=base,
        )
        times.append(time.perf_counter() - t0)
        assert proc.returncode == 0, proc.stderr
        dirs.append(out)
    return {"dirs": dirs, "seconds": times}


@pytest.fixture(scope="session")
def mc_cli_divergent_n400(tmp_path_factory) -> dict:
    """Acceptance run 7: CLI, divergent p=2, n=400, 1000 reps, three times."""
    base = tmp_path_factory.mktemp("cli_divergent_n400")
    dirs = []
    for tag, workers in (("a", 1), ("b", 1), ("c", 8)):
        out = base / tag
        proc = run_cli(
            [
                "mc", "--design", "divergent_p2", "--n", "400", "--reps", "1000",
                "--seed", str(DIVERGENT_SEED), "--workers", str(workers), "--out", str(out),
            ],
            cwd=base,
        )
        assert proc.returncode == 0, proc.stderr
        dirs.append(out)
    return {"dirs": dirs}


@pytest.fixture(scope="session")
def mc_bounded_n800():
    """Bounded design at n=800, Gaussian errors, iterations 0/1/3/6."""
    design = default_design("bounded_p2", n=800, reps=1000, master_seed=N800_SEED)
    return run(design, workers=2)


@pytest.fixture(scope="session")
def mc_t6_n800():
    """Bounded design at n=800 with t6 errors, IV and third iterate."""
    design = McDesign(
        design="bounded_circulant",
        n=800,
        p=2,
        error_dist="t6",
        reps=1000,
        master_seed=T6_SEED,
        estimators=(("iv", 0), ("iv", 3)),
        include_pmle=False,
        true_lam=(0.4, 0.5),
        true_beta=(1.0, 0.5),
    )
    return run(design, workers=2)


@pytest.fixture(scope="session")
def mc_pmle_n800():
    """Bounded design at n=800 with the reference PMLE for the parity check."""
    design = McDesign(
        design="bounded_circulant",
        n=800,
        p=2,
        error_dist="std_normal",
        reps=400,
        master_seed=PMLE_SEED,
        estimators=(("iv", 0), ("iv", 3)),
        include_pmle=True,
        true_lam=(0.4, 0.5),
        true_beta=(1.0, 0.5),
    )
    return run(design, workers=2)


@pytest.fixture(scope="session")
def bench_n800_p4():
    """Benchmark rows for the n=800, p=4 reference comparison."""
    from sarnewton import rng as rngmod
    from sarnewton.model import draw_errors, simulate_given_errors

    design = default_design("bounded_p4", n=800, master_seed=3)
    weights = design.build_weights()
    X = rngmod.stream(3, 0, rngmod.PURPOSE_X).uniform(size=(800, design.k))
    u = draw_errors("std_normal", 800, rngmod.stream(3, 0, rngmod.PURPOSE_ERRORS), X=X)
    y = simulate_given_errors(
        weights, X, np.array(design.true_beta), np.array(design.true_lam), u
    )
    dataset = SarDataset(y=y, X=X, weights=weights)
    return benchmark(dataset, ["iv", "newton3", "pmle"], repetitions=3)
