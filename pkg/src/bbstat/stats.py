"""Weighted Hotelling T^2 and the label-permutation engine.

The statistic uses weighted group means, the element-wise weighted
variance of each group and their sum as a diagonal pooled variance::

    T^2 = N * sum_c (mean1_c - mean2_c)^2 / (var1_c + var2_c)

with N the total number of retained samples.  A channel with zero pooled
variance and a nonzero mean difference makes the statistic +inf.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .rng import relabelings

__all__ = [
    "GroupSamples",
    "PermutationPlan",
    "StatResult",
    "weighted_mean",
    "weighted_variance",
    "hotelling_t2",
    "exact_p",
    "permutation_test",
    "t2_from_aggregates",
    "cohort_permutation_test",
]

# relative tolerance used by the batched engine to call two statistics tied
TIE_RTOL = 1e-10


@dataclass
class GroupSamples:
    """Weighted samples of one group at one voxel.

    Parameters
    ----------
    weights : array, shape (n,)
    values : array, shape (n, C)
    images : array of int, shape (n,), optional
        Source image index of every sample.
    """

    weights: np.ndarray
    values: np.ndarray
    images: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        self.values = values
        if len(self.weights) != len(self.values):
            raise ValueError("weights and values disagree in length")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and nonnegative")
        if self.images is not None:
            self.images = np.asarray(self.images, dtype=np.int64).reshape(-1)

    @classmethod
    def from_samples(cls, samples):
        """Build from a list of :class:`~bbstat.blockmatch.WeightedSample`."""
        return cls(
            [s.weight for s in samples],
            np.array([np.asarray(s.values, dtype=np.float64) for s in samples]),
            [s.source_image for s in samples],
        )

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class PermutationPlan:
    B: int = 2000
    seed: int = 0
    mode: str = "image_level"

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if self.mode not in ("image_level", "sample_level"):
            raise ValueError(f"unknown permutation mode {self.mode!r}")


@dataclass
class StatResult:
    observed: float
    replicates: np.ndarray
    p_raw: float


def weighted_mean(g: GroupSamples) -> np.ndarray:
    total = g.weights.sum()
    if not total > 0:
        raise ValueError("zero total weight")
    return (g.weights @ g.values) / total


def weighted_variance(g: GroupSamples, mean=None) -> np.ndarray:
    total = g.weights.sum()
    if not total > 0:
        raise ValueError("zero total weight")
    if mean is None:
        mean = weighted_mean(g)
    dev = g.values - mean
    return (g.weights @ (dev * dev)) / total


def hotelling_t2(g1: GroupSamples, g2: GroupSamples, n=None) -> float:
    """Two-sample weighted T^2 with diagonal pooled variance.

    ``n`` overrides the sample count multiplier (default ``len(g1) + len(g2)``).
    """
    m1, m2 = weighted_mean(g1), weighted_mean(g2)
    s = weighted_variance(g1, m1) + weighted_variance(g2, m2)
    diff2 = (m1 - m2) ** 2
    if n is None:
        n = len(g1) + len(g2)
    total = 0.0
    for d, v in zip(diff2, s):
        if v > 0:
            total += d / v
        elif d > 0:
            return float("inf")
    return float(n * total)


def exact_p(observed, replicates, rtol: float = 0.0) -> float:
    """(#{replicate >= observed} + 1) / (B + 1).

    With ``rtol > 0`` replicates within ``rtol * |observed|`` below the
    observed value also count as ties.
    """
    rep = np.asarray(replicates, dtype=np.float64).reshape(-1)
    if rep.size == 0:
        raise ValueError("replicates must be nonempty")
    return float((_count_ge(rep[None, :], np.array([observed]), rtol)[0] + 1) / (rep.size + 1))


def _count_ge(replicates, observed, rtol):
    observed = np.asarray(observed, dtype=np.float64)
    if rtol > 0:
        with np.errstate(invalid="ignore"):
            thr = np.where(np.isinf(observed), observed, observed - rtol * np.abs(observed))
    else:
        thr = observed
    return np.sum(replicates >= thr[:, None], axis=1)


def t2_from_aggregates(count, wsum, wp, wpp, labels, rtol: float = 1e-12) -> np.ndarray:
    """T^2 for many voxels under many group-1 labelings.

    Parameters
    ----------
    count, wsum : arrays, shape (V, M)
        Per-voxel, per-item sample counts and weight sums.
    wp, wpp : arrays, shape (V, M, C)
        Weighted sums of values and squared values.
    labels : bool array, shape (P, M) or (V, P, M)
        Row p marks the items assigned to group 1; a 3-D array gives every
        voxel its own labelings.

    Returns
    -------
    ndarray, shape (V, P)
    """
    G = np.asarray(labels, dtype=np.float64)
    V, M, C = wp.shape
    n_total = count.sum(axis=1)
    w_all = wsum.sum(axis=1)
    p_all = wp.sum(axis=1)
    pp_all = wpp.sum(axis=1)

    if G.ndim == 2:
        P = G.shape[0]
        w1 = wsum @ G.T                                                   # (V, P)
        stacked = np.concatenate([wp, wpp], axis=2).transpose(1, 0, 2).reshape(M, V * 2 * C)
        both = (G @ stacked).reshape(P, V, 2 * C).transpose(1, 0, 2)      # (V, P, 2C)
    else:
        w1 = np.matmul(G, wsum[:, :, None])[..., 0]
        both = np.matmul(G, np.concatenate([wp, wpp], axis=2))
    p1, pp1 = both[..., :C], both[..., C:]
    w2 = w_all[:, None] - w1
    p2 = p_all[:, None, :] - p1
    pp2 = pp_all[:, None, :] - pp1

    # negligible-weight groups carry no evidence
    wtol = rtol * w_all[:, None]
    ok = (w1 > wtol) & (w2 > wtol)
    w1s = np.where(ok, w1, 1.0)[..., None]
    w2s = np.where(ok, w2, 1.0)[..., None]
    m1 = p1 / w1s
    m2 = p2 / w2s
    v1 = np.maximum(pp1 / w1s - m1 * m1, 0.0)
    v2 = np.maximum(pp2 / w2s - m2 * m2, 0.0)
    scale = np.maximum(pp_all / np.where(w_all > 0, w_all, 1.0)[:, None], np.finfo(float).tiny)
    var = v1 + v2
    diff2 = (m1 - m2) ** 2
    tiny = var <= 1e-12 * scale[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(tiny, 0.0, diff2 / np.where(tiny, 1.0, var))
    degenerate = tiny & (diff2 > 1e-20 * scale[:, None, :])
    t2 = n_total[:, None] * ratio.sum(axis=-1)
    t2 = np.where(degenerate.any(axis=-1), np.inf, t2)
    return np.where(ok, t2, 0.0)


def _aggregates_from_groups(g1: GroupSamples, g2: GroupSamples, mode, image_groups=None):
    """Per-item aggregates and the true group-1 labeling for one voxel."""
    w = np.concatenate([g1.weights, g2.weights])
    v = np.concatenate([g1.values, g2.values])
    if mode == "sample_level":
        item = np.arange(len(w))
        truth = np.zeros(len(w), dtype=bool)
        truth[: len(g1)] = True
    else:
        if g1.images is None or g2.images is None:
            raise ValueError("image_level mode needs source image indices")
        item = np.concatenate([g1.images, g2.images])
        if image_groups is None:
            n_items = int(item.max()) + 1
            image_groups = np.zeros(n_items, dtype=np.int64)
            image_groups[g1.images] = 1
            image_groups[g2.images] = 2
            # images with no samples stay unlabeled: drop them from relabeling
            present = np.unique(item)
            remap = -np.ones(n_items, dtype=np.int64)
            remap[present] = np.arange(len(present))
            item = remap[item]
            image_groups = image_groups[present]
        image_groups = np.asarray(image_groups)
        truth = image_groups == 1
    n_items = len(truth)
    C = v.shape[1]
    count = np.bincount(item, minlength=n_items).astype(np.float64)
    wsum = np.bincount(item, weights=w, minlength=n_items)
    wp = np.stack([np.bincount(item, weights=w * v[:, c], minlength=n_items) for c in range(C)], -1)
    wpp = np.stack([np.bincount(item, weights=w * v[:, c] ** 2, minlength=n_items)
                    for c in range(C)], -1)
    return count[None], wsum[None], wp[None], wpp[None], truth


def permutation_test(g1: GroupSamples, g2: GroupSamples, plan: PermutationPlan,
                     image_groups=None, voxel: int = 0) -> StatResult:
    """Permutation test of one voxel.

    In ``image_level`` mode the source-image labels are permuted and the
    samples follow their image; ``image_groups`` gives the label (1/2) of
    every image index when some images contributed no sample.  In
    ``sample_level`` mode the pooled samples are permuted directly, with
    ``voxel`` folded into the random stream.
    """
    if len(g1) + len(g2) < 3:
        raise ValueError("insufficient samples: need N1 + N2 >= 3")
    if len(g1) < 1 or len(g2) < 1:
        raise ValueError("insufficient samples: both groups must be nonempty")
    count, wsum, wp, wpp, truth = _aggregates_from_groups(g1, g2, plan.mode, image_groups)
    n_first = int(truth.sum())
    key = None if plan.mode == "image_level" else voxel
    G = relabelings(plan.seed, len(truth), n_first, plan.B, voxel=key)
    labels = np.vstack([truth[None], G])
    t2 = t2_from_aggregates(count, wsum, wp, wpp, labels)[0]
    observed, reps = float(t2[0]), t2[1:]
    p = float((_count_ge(reps[None], np.array([observed]), TIE_RTOL)[0] + 1) / (plan.B + 1))
    return StatResult(observed, reps, p)


def cohort_permutation_test(count, wsum, wp, wpp, truth, plan: PermutationPlan,
                            samples=None, voxel_ids=None, n_jobs: int = 1, chunk: int = 128):
    """Permutation tests for V voxels sharing one set of items.

    ``truth`` is the true group-1 labeling of the M items (images).  In
    image_level mode every voxel uses the same relabeling per column, so
    column b of the replicate matrix is one joint relabeling.  Work is split
    in fixed chunks of ``chunk`` voxels, so results do not depend on
    ``n_jobs``.

    sample_level mode permutes the pooled samples of each voxel separately;
    it needs ``samples = (weights (V, n), values (V, n, C), is_group1 (n,))``
    and keys each voxel's relabelings by its entry in ``voxel_ids``.

    Returns
    -------
    observed : (V,) array
    replicates : (V, B) array
    p_raw : (V,) array
    """
    truth = np.asarray(truth, dtype=bool)
    V = count.shape[0]
    ids = np.arange(V) if voxel_ids is None else np.asarray(voxel_ids)
    observed = np.empty(V)
    replicates = np.empty((V, plan.B))
    if plan.mode == "image_level":
        G = relabelings(plan.seed, len(truth), int(truth.sum()), plan.B)
        labels = np.vstack([truth[None], G])

        def work(lo):
            hi = min(lo + chunk, V)
            t2 = t2_from_aggregates(count[lo:hi], wsum[lo:hi], wp[lo:hi], wpp[lo:hi], labels)
            observed[lo:hi] = t2[:, 0]
            replicates[lo:hi] = t2[:, 1:]
    else:
        if samples is None:
            raise ValueError("sample_level mode needs the retained samples")
        sw, sv, sg1 = (np.asarray(a) for a in samples)
        sg1 = sg1.astype(bool)
        n = sw.shape[1]
        pos = (sw > 0).astype(np.float64)
        step = max(1, chunk // 4)

        def work(lo):
            hi = min(lo + step, V)
            G = relabelings(plan.seed, n, int(sg1.sum()), plan.B, voxel=ids[lo:hi])
            labels = np.concatenate([np.broadcast_to(sg1, (hi - lo, 1, n)), G], axis=1)
            w = sw[lo:hi]
            v = sv[lo:hi]
            t2 = t2_from_aggregates(pos[lo:hi], w, w[..., None] * v, w[..., None] * v * v, labels)
            observed[lo:hi] = t2[:, 0]
            replicates[lo:hi] = t2[:, 1:]

        chunk = step

    starts = range(0, V, chunk)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(work, starts))
    else:
        for lo in starts:
            work(lo)
    p_raw = (_count_ge(replicates, observed, TIE_RTOL) + 1) / (plan.B + 1)
    return observed, replicates, p_raw
