"""Construction, validation, and storage of spatial weight matrices.

Three built-in designs are provided: symmetric circulant matrices with a
banded first row, random sparse matrices with density growing like
n^(1/3) percent, and distance-band ring matrices built from a dense
pairwise distance matrix.  User-supplied matrices are ingested from a
sparse-triplet CSV format described in :func:`load_weight_set`.

All weight matrices have an exactly zero diagonal and are stored in CSR
form.  A :class:`SpatialWeightSet` is immutable after construction and
safe to share across threads or processes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .errors import InvalidDesignError

__all__ = [
    "SpatialWeightSet",
    "WeightDesignSpec",
    "build_circulant",
    "circulant_weight_set",
    "build_random_sparse",
    "build_distance_rings",
    "build_weights",
    "empty_weight_set",
    "load_weight_set",
    "save_weight_set",
    "spectral_norm",
]

# Power iteration settings for spectral-norm normalization: deterministic
# start (normalized ones vector), relative tolerance, iteration cap.
_POWER_RTOL = 1e-10
_POWER_MAXIT = 10_000


def spectral_norm(mat: sp.spmatrix) -> float:
    """Largest singular value of a symmetric matrix by power iteration.

    Deterministic: starts from the normalized all-ones vector and stops
    when the eigenvalue estimate is stable to a relative tolerance of
    1e-10 (or after 10 000 iterations).  Intended for the symmetric
    nonnegative matrices produced by the weight designs.
    """
    n = mat.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    est = 0.0
    for _ in range(_POWER_MAXIT):
        w = mat @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - est) <= _POWER_RTOL * norm:
            return norm
        est = norm
    return est


def _validate_mats(mats: list[sp.csr_matrix]) -> None:
    n = mats[0].shape[0]
    for i, w in enumerate(mats):
        if w.shape != (n, n):
            raise InvalidDesignError(
                f"matrix {i + 1} has shape {w.shape}, expected ({n}, {n})"
            )
        if w.nnz and not np.all(np.isfinite(w.data)):
            raise InvalidDesignError(f"matrix {i + 1} contains non-finite entries")
        if np.any(w.diagonal() != 0.0):
            raise InvalidDesignError(f"matrix {i + 1} has nonzero diagonal entries")


@dataclass(frozen=True)
class SpatialWeightSet:
    """The p sparse n x n weight matrices of a higher-order SAR model.

    Parameters
    ----------
    mats : tuple of scipy.sparse.csr_matrix
        The weight matrices, all n x n with exactly zero diagonals.
    kind : str
        Construction label: ``circulant``, ``random_sparse``,
        ``distance_rings`` or ``user``.
    spectra : ndarray or None
        (n, p) array of real eigenvalues when the family is
        simultaneously diagonalizable (circulant design only); enables
        an O(n) log-determinant path for the reference PMLE.
    isolated_rows : tuple of int or None
        Per-matrix count of all-zero rows after ring construction.
    """

    mats: tuple[sp.csr_matrix, ...]
    kind: str = "user"
    spectra: np.ndarray | None = None
    isolated_rows: tuple[int, ...] | None = field(default=None)
    n_empty: int | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mats:
            _validate_mats(list(self.mats))
        elif self.n_empty is None or self.n_empty < 1:
            raise InvalidDesignError("an empty weight set needs an explicit n")

    @property
    def n(self) -> int:
        return self.mats[0].shape[0] if self.mats else self.n_empty

    @property
    def p(self) -> int:
        return len(self.mats)

    @property
    def h_scale(self) -> tuple[float, ...]:
        """Reciprocal of the max absolute entry, per matrix.

        Diagnostic for the connectivity regime: entries of order 1/h
        mean each unit has roughly h effective neighbours.  Infinite for
        an all-zero matrix.
        """
        out = []
        for w in self.mats:
            m = float(np.max(np.abs(w.data))) if w.nnz else 0.0
            out.append(1.0 / m if m > 0 else np.inf)
        return tuple(out)


@dataclass(frozen=True)
class WeightDesignSpec:
    """Declarative recipe for building a :class:`SpatialWeightSet`."""

    kind: str
    n: int
    p: int
    seed: int | None = None
    distances: np.ndarray | None = None
    path: str | None = None  # user_csv manifest location

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise InvalidDesignError("n and p must be positive")
        if self.kind == "random_sparse" and self.seed is None:
            raise InvalidDesignError("random_sparse design requires a seed")
        if self.kind == "distance_rings" and self.distances is None:
            raise InvalidDesignError("distance_rings design requires distances")
        if self.kind == "user_csv" and self.path is None:
            raise InvalidDesignError("user_csv design requires a manifest path")
        if self.kind not in ("circulant", "random_sparse", "distance_rings", "user_csv"):
            raise InvalidDesignError(f"unknown weight design kind: {self.kind!r}")


def empty_weight_set(n: int) -> SpatialWeightSet:
    """Weight set with p = 0; the model degenerates to plain regression."""
    return SpatialWeightSet(mats=(), kind="user", n_empty=n)


def build_circulant(i: int, n: int) -> sp.csr_matrix:
    """Symmetric circulant weight matrix of band order ``i``.

    The unnormalized matrix has first row with ones at positions
    2..i+1 and n-i+1..n (1-based) and zeros elsewhere; its spectral norm
    is exactly 2i, so dividing by 2i yields a symmetric circulant with
    zero diagonal, row sums one, and spectral norm one.

    Raises
    ------
    InvalidDesignError
        If ``i < 1`` or ``2 i + 1 > n``.
    """
    if i < 1:
        raise InvalidDesignError("band order i must be >= 1")
    if 2 * i + 1 > n:
        raise InvalidDesignError(f"need 2*i+1 <= n, got i={i}, n={n}")
    offsets = np.concatenate([np.arange(1, i + 1), np.arange(n - i, n)])
    rows = np.repeat(np.arange(n), offsets.size)
    cols = (rows + np.tile(offsets, n)) % n
    vals = np.full(rows.size, 1.0 / (2 * i))
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _circulant_first_row(i: int, n: int) -> np.ndarray:
    fr = np.zeros(n)
    fr[1 : i + 1] = 1.0 / (2 * i)
    fr[n - i :] = 1.0 / (2 * i)
    return fr


def circulant_weight_set(n: int, p: int) -> SpatialWeightSet:
    """Weight set (W_1, ..., W_p) of circulant matrices of orders 1..p.

    All circulants share the DFT eigenbasis, so the set carries its
    eigenvalue table: column i holds the (real) spectrum of W_i.
    """
    mats = tuple(build_circulant(i, n) for i in range(1, p + 1))
    spectra = np.column_stack(
        [np.fft.fft(_circulant_first_row(i, n)).real for i in range(1, p + 1)]
    )
    return SpatialWeightSet(mats=mats, kind="circulant", spectra=spectra)


def build_random_sparse(n: int, p: int, seed: int) -> SpatialWeightSet:
    """Random sparse symmetric weights with density ~ n^(1/3) percent.

    Each matrix starts from off-diagonal entries ``ndtr(-d) * (c < q)``
    with d ~ U[-3, 3], c ~ U[0, 1] iid and q = n^(1/3)/100, is then
    symmetrized as (W + W')/2 and divided by its spectral norm.  The
    quoted density refers to the one-sided draw; symmetrization roughly
    doubles the realized fill, which is reported by callers that care.

    Deterministic in (n, p, seed).
    """
    if n < 2:
        raise InvalidDesignError("need n >= 2")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    q = n ** (1.0 / 3.0) / 100.0
    mats = []
    for _ in range(p):
        d = rng.uniform(-3.0, 3.0, size=(n, n))
        c = rng.uniform(0.0, 1.0, size=(n, n))
        w = ndtr(-d) * (c < q)
        np.fill_diagonal(w, 0.0)
        w = (w + w.T) / 2.0
        w_sp = sp.csr_matrix(w)
        norm = spectral_norm(w_sp)
        if norm == 0.0:
            raise InvalidDesignError(
                "random sparse draw produced an all-zero matrix; "
                "increase n or change the seed"
            )
        mats.append(sp.csr_matrix(w_sp / norm))
    return SpatialWeightSet(mats=tuple(mats), kind="random_sparse")


def build_distance_rings(distances: np.ndarray, p: int) -> SpatialWeightSet:
    """Row-normalized ring matrices from a pairwise distance matrix.

    Matrix i links pairs (l, k), l != k, with i-1 < d_lk <= i; pairs at
    distance exactly an integer boundary i fall in ring i (closed upper
    end).  Zero distances between distinct units join ring 1.  Rows are
    normalized to sum to one; rows with no neighbour in a ring stay zero
    and are counted in ``isolated_rows``.
    """
    d = np.asarray(distances, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise InvalidDesignError("distance matrix must be square")
    if not np.array_equal(d, d.T):
        raise InvalidDesignError("distance matrix must be symmetric")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise InvalidDesignError("distances must be finite and nonnegative")
    if np.any(np.diag(d) != 0):
        raise InvalidDesignError("distance matrix must have zero diagonal")
    n = d.shape[0]
    offdiag = ~np.eye(n, dtype=bool)
    mats = []
    isolated = []
    for i in range(1, p + 1):
        if i == 1:
            mask = (d <= 1.0) & offdiag
        else:
            mask = (d > i - 1.0) & (d <= float(i)) & offdiag
        w = mask.astype(float)
        row_sums = w.sum(axis=1)
        isolated.append(int(np.sum(row_sums == 0)))
        nonzero = row_sums > 0
        w[nonzero] /= row_sums[nonzero, None]
        mats.append(sp.csr_matrix(w))
    return SpatialWeightSet(
        mats=tuple(mats), kind="distance_rings", isolated_rows=tuple(isolated)
    )


def build_weights(spec: WeightDesignSpec) -> SpatialWeightSet:
    """Build the weight set described by ``spec``."""
    if spec.kind == "circulant":
        return circulant_weight_set(spec.n, spec.p)
    if spec.kind == "random_sparse":
        return build_random_sparse(spec.n, spec.p, spec.seed)
    if spec.kind == "user_csv":
        wset = load_weight_set(spec.path)
        if wset.n != spec.n or wset.p != spec.p:
            raise InvalidDesignError(
                f"manifest declares (n, p) = ({wset.n}, {wset.p}), "
                f"design spec declares ({spec.n}, {spec.p})"
            )
        return wset
    return build_distance_rings(spec.distances, spec.p)


# ---------------------------------------------------------------------------
# Sparse-triplet CSV interchange format
#
# A weight set on disk is a manifest file plus one triplet CSV per matrix.
# Manifest (key = value lines, '#' comments allowed):
#     n = 816
#     p = 2
#     matrix_1 = W1.csv
#     matrix_2 = W2.csv
# Each triplet CSV has the header "row,col,value" with 1-based indices;
# duplicate triplets are summed.  Matrix paths are relative to the
# manifest's directory.
# ---------------------------------------------------------------------------


def _read_manifest(path: Path) -> tuple[int, int, list[Path]]:
    entries: dict[str, str] = {}
    order: list[tuple[str, str]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidDesignError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
        order.append((key, value))
    try:
        n = int(entries["n"])
        p = int(entries["p"])
    except (KeyError, ValueError) as exc:
        raise InvalidDesignError(f"{path}: manifest must declare integer n and p") from exc
    files = [value for key, value in order if key.startswith("matrix_")]
    if len(files) != p:
        raise InvalidDesignError(
            f"{path}: manifest declares p={p} but lists {len(files)} matrix files"
        )
    return n, p, [path.parent / f for f in files]


def _read_triplets(path: Path, n: int) -> sp.csr_matrix:
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidDesignError(f"cannot read weight file {path}: {exc}") from exc
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        warnings.warn(f"{path}: empty weight file, using an all-zero matrix")
        return sp.csr_matrix((n, n))
    start = 1 if lines[0].lower().replace(" ", "") == "row,col,value" else 0
    rows, cols, vals = [], [], []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        parts = line.split(",")
        if len(parts) != 3:
            raise InvalidDesignError(f"{path}:{lineno}: expected 'row,col,value'")
        try:
            r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise InvalidDesignError(f"{path}:{lineno}: parse failure: {exc}") from exc
        if not (1 <= r <= n and 1 <= c <= n):
            raise InvalidDesignError(
                f"{path}:{lineno}: index ({r},{c}) out of range for n={n}"
            )
        if r == c:
            raise InvalidDesignError(
                f"{path}:{lineno}: diagonal entry ({r},{r}) not allowed"
            )
        rows.append(r - 1)
        cols.append(c - 1)
        vals.append(v)
    if not rows:
        warnings.warn(f"{path}: no triplets found, using an all-zero matrix")
        return sp.csr_matrix((n, n))
    # coo->csr sums duplicates, the documented ingestion semantics
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def load_weight_set(manifest_path: str | Path) -> SpatialWeightSet:
    """Load a user-supplied weight set from a manifest of triplet CSVs."""
    path = Path(manifest_path)
    n, _, files = _read_manifest(path)
    mats = tuple(_read_triplets(f, n) for f in files)
    return SpatialWeightSet(mats=mats, kind="user")


def save_weight_set(wset: SpatialWeightSet, out_dir: str | Path) -> Path:
    """Write ``wset`` as a manifest plus triplet CSVs; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"n = {wset.n}", f"p = {wset.p}"]
    for i, w in enumerate(wset.mats, start=1):
        fname = f"W{i}.csv"
        coo = w.tocoo()
        rows = ["row,col,value"]
        order = np.lexsort((coo.col, coo.row))
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            rows.append(f"{r + 1},{c + 1},{float(v)!r}")
        (out / fname).write_text("\n".join(rows) + "\n")
        lines.append(f"matrix_{i} = {fname}")
    manifest = out / "weights_manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
