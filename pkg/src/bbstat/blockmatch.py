"""Non-local block matching across a cohort of images.

At an analysis voxel ``x`` every image is searched within a window around
``x`` for blocks resembling the query blocks (the blocks of the query
images at ``x``).  Each candidate gets a Gaussian-kernel weight built from
its ``K`` nearest queries; the ``L`` heaviest candidates per group become
the weighted samples fed to the permutation test.

Two implementations live here: the per-voxel functions
(:func:`kernel_weight`, :func:`candidate_weight`, :func:`gather_samples`)
and :func:`match_cohort`, which does the same for every voxel at once with
whole-image array operations and returns per-image sufficient statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .corevol import BlockVector, Mask, Volume, block_offsets, extract_block

__all__ = [
    "InsufficientSamplesError",
    "MatchConfig",
    "Bandwidth",
    "WeightedSample",
    "kernel_weight",
    "candidate_weight",
    "gather_samples",
    "estimate_sigma",
    "make_bandwidth",
    "valid_center_mask",
    "match_cohort",
    "CohortSamples",
]


class InsufficientSamplesError(ValueError):
    """Fewer than two retained samples in a group; the voxel is untestable."""


@dataclass(frozen=True)
class MatchConfig:
    """Block-matching parameters.

    ``K`` and ``L`` default (None) to min(Q1, Q2) and 2 * min(M1, M2).
    ``sigma`` is a noise level or the string ``"estimate"``.
    """

    block_radius: int = 1
    search_radius: int = 2
    K: int | None = None
    L: int | None = None
    sigma: float | str = "estimate"
    unit_weights: bool = False
    h_space: float | None = None

    def __post_init__(self):
        if self.block_radius < 0 or self.search_radius < 0:
            raise ValueError("radii must be nonnegative")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be positive")
        if self.L is not None and self.L < 1:
            raise ValueError("L must be positive")
        if not (self.sigma == "estimate" or float(self.sigma) >= 0):
            raise ValueError("sigma must be nonnegative or 'estimate'")


@dataclass(frozen=True)
class Bandwidth:
    h_block: float
    h_space: float

    def __post_init__(self):
        if not (self.h_block > 0 and self.h_space > 0):
            raise ValueError("bandwidths must be strictly positive")


@dataclass(frozen=True)
class WeightedSample:
    weight: float
    values: np.ndarray
    source_image: int
    source_voxel: tuple


def make_bandwidth(sigma: float, block_len: int, search_radius: int,
                   value_range: float = 1.0, h_space: float | None = None) -> Bandwidth:
    """Bandwidths for the block and spatial kernel components.

    ``block_len`` is the full block vector length (voxels times channels).
    A zero noise level is floored at 1e-3 of the data range.
    """
    h_block = float(sigma) * np.sqrt(block_len)
    floor = 1e-3 * float(value_range) if value_range > 0 else 1e-3
    h_block = max(h_block, floor)
    if h_space is None:
        h_space = max(search_radius, 1) / 2.0
    return Bandwidth(h_block, float(h_space))


def kernel_weight(u, bw: Bandwidth, n_block: int | None = None) -> float:
    """Gaussian kernel without its normalizing constant.

    ``u`` holds the block difference followed by the three spatial offset
    components; ``n_block`` defaults to ``len(u) - 3``.
    """
    u = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ValueError("kernel input must be finite")
    if n_block is None:
        n_block = u.size - 3
    block, space = u[:n_block], u[n_block:]
    expo = (block @ block) / bw.h_block**2 + (space @ space) / bw.h_space**2
    return float(np.exp(-0.5 * expo))


def candidate_weight(cand: BlockVector, cand_offset, queries, K: int, bw: Bandwidth) -> float:
    """Geometric mean of the kernel values against the K nearest queries."""
    if not queries:
        raise ValueError("empty query set")
    if K > len(queries) or K < 1:
        raise ValueError(f"K={K} must be in [1, {len(queries)}]")
    c = np.asarray(cand.values, dtype=np.float64)
    dist = np.array([np.sum((c - q.values) ** 2) for q in queries])
    nearest = np.argsort(dist, kind="stable")[:K]
    off = np.asarray(cand_offset, dtype=np.float64)
    expo = dist[nearest] / bw.h_block**2 + (off @ off) / bw.h_space**2
    return float(np.exp(-0.5 * np.mean(expo)))


def _clipped_centers(dims, x, search_radius, block_radius, is_2d):
    """Candidate centers in the search window whose full block fits."""
    out = []
    for off in block_offsets(search_radius, is_2d):
        c = tuple(int(v) for v in np.asarray(x) + off)
        rz = 0 if is_2d else block_radius
        lo = (c[0] - block_radius, c[1] - block_radius, c[2] - rz)
        hi = (c[0] + block_radius, c[1] + block_radius, c[2] + rz)
        if min(lo) >= 0 and all(h < d for h, d in zip(hi, dims)):
            out.append((c, tuple(int(v) for v in off)))
    return out


def default_K(n_queries_1: int, n_queries_2: int) -> int:
    return max(1, min(n_queries_1, n_queries_2))


def default_L(m1: int, m2: int, n_offsets: int) -> int:
    """Eight samples per image of the smaller group, capped at the candidate count."""
    return max(1, min(8 * min(m1, m2), max(m1, m2) * n_offsets))


def gather_samples(images, groups, queries, x, cfg: MatchConfig, bw: Bandwidth):
    """Weighted samples for voxel ``x``, split by group.

    Parameters
    ----------
    images : list of Volume
    groups : sequence of int
        Group label (1 or 2) per image.
    queries : list of BlockVector
        Query blocks at ``x`` from both groups.
    x : tuple of int
    cfg : MatchConfig
    bw : Bandwidth

    Returns
    -------
    group1, group2 : list of WeightedSample
    """
    groups = np.asarray(groups)
    x = tuple(int(v) for v in x) + ((0,) if len(x) == 2 else ())
    vol0 = images[0]
    K = cfg.K if cfg.K is not None else len(queries)
    K = min(K, len(queries))
    m1 = int(np.sum(groups == 1))
    m2 = int(np.sum(groups == 2))
    centers = _clipped_centers(vol0.dims, x, cfg.search_radius, cfg.block_radius, vol0.is_2d)
    if not centers:
        raise InsufficientSamplesError(f"no valid candidate centers at {x}")
    L = cfg.L if cfg.L is not None else default_L(m1, m2, len(centers))
    out = {1: [], 2: []}
    for m, vol in enumerate(images):
        for c, off in centers:
            blk = extract_block(vol, c, cfg.block_radius)
            w = candidate_weight(blk, off, queries, K, bw)
            out[int(groups[m])].append(
                WeightedSample(w, vol.data[c].copy(), m, c)
            )
    result = []
    for g in (1, 2):
        samples = sorted(out[g], key=lambda s: (-s.weight, s.source_image, s.source_voxel))
        samples = samples[:L]
        if cfg.unit_weights:
            samples = [WeightedSample(1.0, s.values, s.source_image, s.source_voxel)
                       for s in samples]
        if len(samples) < 2:
            raise InsufficientSamplesError(f"group {g} has {len(samples)} samples at {x}")
        result.append(samples)
    return result[0], result[1]


def estimate_sigma(vol: Volume, mask: Mask | None = None) -> float:
    """Noise standard deviation from face-neighbour pseudo-residuals.

    Each voxel of channel 0 minus the mean of its 4 (2D) or 6 (3D) face
    neighbours, scaled by sqrt(k / (k + 1)), gives a residual with the
    noise variance; the robust scale is 1.4826 * MAD over the mask.
    """
    img = vol.data[..., 0]
    if mask is None:
        mask = Mask(np.ones(vol.dims, dtype=bool))
    if mask.dims != vol.dims:
        raise ValueError("mask dims do not match volume")
    axes = [0, 1] if vol.is_2d else [0, 1, 2]
    k = 2 * len(axes)
    inner = np.ones(vol.dims, dtype=bool)
    nbr_sum = np.zeros_like(img)
    for ax in axes:
        nbr_sum += np.roll(img, 1, axis=ax) + np.roll(img, -1, axis=ax)
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[ax] = 0
        sl_hi[ax] = -1
        inner[tuple(sl_lo)] = False
        inner[tuple(sl_hi)] = False
    sel = mask.data & inner
    if sel.sum() < 100:
        raise ValueError(f"mask too small for noise estimation ({int(sel.sum())} < 100 voxels)")
    resid = (img - nbr_sum / k) * np.sqrt(k / (k + 1.0))
    r = resid[sel]
    mad = np.median(np.abs(r - np.median(r)))
    return float(1.4826 * mad)


def valid_center_mask(dims, block_radius: int, search_radius: int) -> np.ndarray:
    """Voxels whose whole search window of full blocks lies inside the volume."""
    is_2d = dims[2] == 1
    margin = block_radius + search_radius
    out = np.zeros(dims, dtype=bool)
    mz = 0 if is_2d else margin
    if any(d - 2 * m <= 0 for d, m in zip(dims, (margin, margin, mz))):
        return out
    out[margin:dims[0] - margin, margin:dims[1] - margin, mz:dims[2] - mz] = True
    return out


@dataclass
class CohortSamples:
    """Per-voxel, per-image sufficient statistics of the retained samples.

    Arrays are indexed (voxel, image[, channel]):
    ``count`` retained samples, ``wsum`` their weights, ``wp`` the
    weighted value sums and ``wpp`` the weighted squared-value sums.
    ``testable`` flags voxels with at least two samples in each group.
    """

    voxels: np.ndarray
    count: np.ndarray
    wsum: np.ndarray
    wp: np.ndarray
    wpp: np.ndarray
    testable: np.ndarray
    sample_weights: np.ndarray | None = None
    sample_values: np.ndarray | None = None
    sample_is_group1: np.ndarray | None = None

    @property
    def samples(self):
        return self.sample_weights, self.sample_values, self.sample_is_group1


def _shift(arr, off):
    """View of ``arr`` translated so that out[x] = arr[x + off] (periodic)."""
    return np.roll(arr, shift=tuple(-int(o) for o in off), axis=(0, 1, 2))


def _box_sum(arr, radius, is_2d):
    size = (2 * radius + 1, 2 * radius + 1, 1 if is_2d else 2 * radius + 1)
    return ndimage.uniform_filter(arr, size=size, mode="wrap") * float(np.prod(size))


def match_cohort(data: np.ndarray, groups, query_idx, voxels, cfg: MatchConfig,
                 bw: Bandwidth) -> CohortSamples:
    """Block matching at many voxels at once.

    Parameters
    ----------
    data : ndarray, shape (M, nx, ny, nz, C)
    groups : array of int, shape (M,)
    query_idx : sequence of int
        Image indices of all queries (both groups).
    voxels : ndarray, shape (V, 3)
        Analysis voxels; each must satisfy :func:`valid_center_mask`.
    """
    data = np.asarray(data, dtype=np.float64)
    groups = np.asarray(groups)
    M, nx, ny, nz, C = data.shape
    is_2d = nz == 1
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    V = len(voxels)
    vx = (voxels[:, 0], voxels[:, 1], voxels[:, 2])
    offsets = block_offsets(cfg.search_radius, is_2d)
    O = len(offsets)
    Q = len(query_idx)
    K = cfg.K if cfg.K is not None else Q
    K = min(K, Q)
    m1 = int(np.sum(groups == 1))
    m2 = int(np.sum(groups == 2))
    L = cfg.L if cfg.L is not None else default_L(m1, m2, O)

    # log-weights, shape (M, O, V)
    logw = np.empty((M, O, V))
    space = np.sum(offsets.astype(np.float64) ** 2, axis=1) / bw.h_space**2
    if cfg.unit_weights and L >= max(m1, m2) * O:
        # all candidates are kept and set to 1; no need to rank them
        logw[:] = 0.0
    else:
        if Q == 0:
            raise ValueError("block matching needs at least one query image")
        queries = data[list(query_idx)]
        for m in range(M):
            for o, off in enumerate(offsets):
                shifted = _shift(data[m], off)
                dist = np.empty((Q, V))
                for q in range(Q):
                    sq = np.sum((shifted - queries[q]) ** 2, axis=-1)
                    dist[q] = _box_sum(sq, cfg.block_radius, is_2d)[vx]
                if K < Q:
                    dist.sort(axis=0, kind="stable")
                nearest = dist[:K]
                logw[m, o] = -0.5 * (nearest.mean(axis=0) / bw.h_block**2 + space[o])
        # common per-voxel rescaling keeps the best candidate at weight 1
        logw -= logw.max(axis=(0, 1), keepdims=True)
    weights = np.exp(logw)

    count = np.zeros((V, M))
    wsum = np.zeros((V, M))
    wp = np.zeros((V, M, C))
    wpp = np.zeros((V, M, C))
    testable = np.ones(V, dtype=bool)
    vidx = np.arange(V)
    s_w, s_v, s_g1 = [], [], []
    for g in (1, 2):
        members = np.flatnonzero(groups == g)
        w_g = weights[members].reshape(len(members) * O, V)
        # stable sort on -w keeps (image index, offset order) for ties
        order = np.argsort(-w_g, axis=0, kind="stable")[:L]
        kept_w = np.take_along_axis(w_g, order, axis=0)
        if cfg.unit_weights:
            kept_w = np.ones_like(kept_w)
        img_local = order // O
        off_idx = order % O
        testable &= (kept_w > 0).sum(axis=0) >= 2
        for j in range(order.shape[0]):
            m = members[img_local[j]]
            src = voxels + offsets[off_idx[j]]
            vals = data[m, src[:, 0], src[:, 1], src[:, 2]]
            w = kept_w[j]
            count[vidx, m] += w > 0
            wsum[vidx, m] += w
            wp[vidx, m] += w[:, None] * vals
            wpp[vidx, m] += w[:, None] * vals * vals
            s_w.append(w)
            s_v.append(vals)
            s_g1.append(g == 1)
    return CohortSamples(voxels, count, wsum, wp, wpp, testable,
                         np.stack(s_w, axis=1), np.stack(s_v, axis=1), np.array(s_g1))
