"""Shared numeric kernels: norms, medians, percentiles, small dense solves, RNG."""

import math
import warnings

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve


class SingularSystemError(ValueError):
    """Raised when a dense solve hits a pivot below tolerance even after ridge."""


PIVOT_TOL = 1e-12


def as_vector(v):
    """Coerce to a float64 1-D array without copying when possible."""
    arr = np.ascontiguousarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected 1-D vector, got shape {arr.shape}")
    return arr


def l2_norm(v):
    arr = as_vector(v)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite vector")
    return float(np.linalg.norm(arr))


def coordinate_median(vs):
    """Coordinate-wise median of a non-empty list of equal-length vectors.

    Even counts take the mean of the two middle values per coordinate.
    """
    if len(vs) == 0:
        raise ValueError("coordinate_median of empty list")
    stacked = np.stack([as_vector(v) for v in vs])
    if stacked.ndim != 2:
        raise ValueError("mismatched vector lengths")
    return np.median(stacked, axis=0)


def percentile(values, alpha):
    """Nearest-rank percentile: sorted value at 1-based index ceil(alpha * N)."""
    n = len(values)
    if n == 0:
        raise ValueError("percentile of empty list")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = math.ceil(alpha * n)
    return float(ordered[rank - 1])


def solve_dense(m, rhs, ridge=0.0):
    """Solve (m + ridge*I) x = rhs by LU with partial pivoting.

    Raises SingularSystemError when a pivot falls below PIVOT_TOL, which
    callers treat as an estimation fallback signal.
    """
    mat = np.asarray(m, dtype=np.float64)
    b = as_vector(rhs)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"matrix must be square, got shape {mat.shape}")
    if mat.shape[0] != b.shape[0]:
        raise ValueError("rhs length does not match matrix")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    if ridge > 0:
        mat = mat + ridge * np.eye(mat.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(mat, check_finite=True)
    if np.abs(np.diag(lu)).min() < PIVOT_TOL:
        raise SingularSystemError("singular system")
    return lu_solve((lu, piv), b)


class RngStream:
    """Seeded, splittable random stream.

    Built on numpy's SeedSequence so spawned child streams are statistically
    independent and the whole tree is reproducible from one root seed.
    """

    def __init__(self, seed_or_sequence):
        if isinstance(seed_or_sequence, np.random.SeedSequence):
            self._seq = seed_or_sequence
        else:
            self._seq = np.random.SeedSequence(int(seed_or_sequence))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n):
        """Produce n independent child streams."""
        return [RngStream(seq) for seq in self._seq.spawn(n)]

    def normal(self, mean, std, size=None):
        return self._gen.normal(mean, std, size)

    def integers(self, low, high=None):
        return int(self._gen.integers(low, high))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)


def gaussian_sample(rng, mean, std, d):
    """d i.i.d. draws from Normal(mean, std^2); deterministic given rng state."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    return rng.normal(mean, std, d)
