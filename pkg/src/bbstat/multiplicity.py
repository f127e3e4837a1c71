"""Multiple-testing adjustment: step-down minP, Bonferroni and BH.

The step-down minP adjustment follows the single-permutation scheme of
Ge, Dudoit and Speed (2003): raw permutation p-values are obtained by a
within-row rank transform of the statistic matrix, successive minima are
accumulated from the least significant test upward, and a final forward
maximum enforces monotonicity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corevol import Mask

__all__ = [
    "StatMatrix",
    "PValueSet",
    "raw_p_matrix",
    "stepdown_minp",
    "bonferroni",
    "bh_fdr",
    "threshold_map",
]


@dataclass
class StatMatrix:
    """Permutation replicates (N tests x B columns) and observed statistics."""

    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.observed = np.asarray(self.observed, dtype=np.float64).reshape(-1)
        if self.values.shape[0] != self.observed.shape[0]:
            raise ValueError("observed length must equal the number of rows")
        if np.any(np.isnan(self.values)) or np.any(np.isnan(self.observed)):
            raise ValueError("statistics must not be NaN")

    @property
    def n_tests(self) -> int:
        return self.values.shape[0]

    @property
    def B(self) -> int:
        return self.values.shape[1]


@dataclass
class PValueSet:
    raw: np.ndarray
    adjusted: np.ndarray
    method: str
    voxel_index: np.ndarray | None = field(default=None)


def raw_p_matrix(m: StatMatrix) -> np.ndarray:
    """p*[n, b] = #{b' : theta[n, b'] >= theta[n, b]} / B, via one sort per row."""
    vals = m.values
    B = vals.shape[1]
    srt = np.sort(vals, axis=1)
    out = np.empty_like(vals)
    for n in range(vals.shape[0]):
        # number of entries strictly below each value, then complement
        below = np.searchsorted(srt[n], vals[n], side="left")
        out[n] = (B - below) / B
    return out


def stepdown_minp(m: StatMatrix, raw, include_observed: bool = False,
                  voxel_index=None) -> PValueSet:
    """Step-down minP adjusted p-values.

    Parameters
    ----------
    m : StatMatrix
    raw : array, shape (N,)
        Raw p-values of the observed statistics.
    include_observed : bool
        If True the observed statistics are prepended as column 0 of the
        replicate matrix, so that the null distribution of the minima
        contains the identity labeling and p* is on the same (B + 1) grid
        as ``raw``.  If False the matrix is used as given.
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if raw.shape[0] != m.n_tests:
        raise ValueError(f"raw has {raw.shape[0]} entries, matrix has {m.n_tests} rows")
    if include_observed:
        m = StatMatrix(np.hstack([m.observed[:, None], m.values]), m.observed)
    pstar = raw_p_matrix(m)
    B = m.B
    N = m.n_tests
    order = np.lexsort((np.arange(N), raw))
    adj_sorted = np.empty(N)
    q = pstar[order[-1]].copy()
    adj_sorted[-1] = np.count_nonzero(q <= raw[order[-1]]) / B
    for n in range(N - 2, -1, -1):
        np.minimum(q, pstar[order[n]], out=q)
        adj_sorted[n] = np.count_nonzero(q <= raw[order[n]]) / B
    adj_sorted = np.maximum.accumulate(adj_sorted)
    adjusted = np.empty(N)
    adjusted[order] = adj_sorted
    adjusted = np.clip(np.maximum(adjusted, raw), 0.0, 1.0)
    return PValueSet(raw, adjusted, "minp", voxel_index)


def bonferroni(raw, voxel_index=None) -> PValueSet:
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    return PValueSet(raw, np.minimum(1.0, raw.size * raw), "bonferroni", voxel_index)


def bh_fdr(raw, voxel_index=None) -> PValueSet:
    """Benjamini-Hochberg step-up adjusted p-values."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    N = raw.size
    order = np.argsort(raw, kind="stable")
    ranked = np.minimum(1.0, N * raw[order] / np.arange(1, N + 1))
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted = np.empty(N)
    adjusted[order] = ranked
    return PValueSet(raw, adjusted, "bh", voxel_index)


def no_correction(raw, voxel_index=None) -> PValueSet:
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    return PValueSet(raw, raw.copy(), "none", voxel_index)


def threshold_map(pv: PValueSet, alpha: float, dims) -> Mask:
    """Mask of voxels whose adjusted p-value is below ``alpha``.

    ``pv.voxel_index`` holds the (x, y, z) coordinate of every test; voxels
    without a test are never significant.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    dims = tuple(dims) + (1,) * (3 - len(dims))
    out = np.zeros(dims, dtype=bool)
    idx = pv.voxel_index
    if idx is None:
        idx = np.array(np.unravel_index(np.arange(pv.adjusted.size), dims)).T
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
    sig = pv.adjusted < alpha
    out[idx[sig, 0], idx[sig, 1], idx[sig, 2]] = True
    return Mask(out)
