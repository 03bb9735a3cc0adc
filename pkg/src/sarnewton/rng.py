"""Deterministic random-number streams for simulation and Monte Carlo.

Every stream is a Philox 4x64 counter-based generator keyed by
``SeedSequence(master_seed, spawn_key=(replication, purpose))``.  The
purpose tag separates draws that belong to different roles (regressors,
disturbances, weight construction) so that adding a new consumer never
shifts the draws of an existing one.  This keying is fixed for the life
of the package: replication r of a run is bit-identical no matter how
many workers execute the run or in which order replications finish.
"""

from __future__ import annotations

import numpy as np

# Purpose tags; values are part of the reproducibility contract.
PURPOSE_WEIGHTS = 0
PURPOSE_X = 1
PURPOSE_ERRORS = 2


def stream(master_seed: int, replication: int, purpose: int) -> np.random.Generator:
    """Return the generator for one (replication, purpose) cell of a run."""
    if master_seed < 0 or replication < 0 or purpose < 0:
        raise ValueError("seed components must be nonnegative")
    ss = np.random.SeedSequence(master_seed, spawn_key=(replication, purpose))
    return np.random.Generator(np.random.Philox(ss))


def design_stream(master_seed: int, purpose: int) -> np.random.Generator:
    """Stream for quantities fixed across replications (e.g. weights)."""
    return stream(master_seed, 0, purpose)
