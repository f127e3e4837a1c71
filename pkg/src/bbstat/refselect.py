"""Query (reference) image selection by affinity propagation.

Large groups are summarized by their affinity-propagation exemplars; small
groups use every image as a query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .corevol import Mask

__all__ = [
    "SimilarityMatrix",
    "ApResult",
    "similarity_matrix",
    "affinity_propagation",
    "select_queries",
    "ExemplarSelector",
    "SMALL_GROUP_THRESHOLD",
]

SMALL_GROUP_THRESHOLD = 8


@dataclass
class SimilarityMatrix:
    s: np.ndarray
    preference: float

    @property
    def n(self) -> int:
        return self.s.shape[0]

    def with_preference(self, preference: float) -> "SimilarityMatrix":
        s = self.s.copy()
        np.fill_diagonal(s, preference)
        return SimilarityMatrix(s, float(preference))


@dataclass
class ApResult:
    exemplar_indices: list
    assignment: np.ndarray
    iterations_run: int
    converged: bool


def _flatten(images, mask):
    arrs = []
    for img in images:
        data = img.data if hasattr(img, "data") else np.asarray(img, dtype=np.float64)
        if mask is not None:
            m = mask.data if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
            data = data[m]
        arrs.append(np.asarray(data, dtype=np.float64).reshape(-1))
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError("images have mismatched dimensions")
    return np.stack(arrs)


def similarity_matrix(images, mask=None, preference=None) -> SimilarityMatrix:
    """Negative squared Euclidean distances over masked voxels and channels.

    The diagonal holds ``preference`` (default: median off-diagonal value).
    """
    shapes = {tuple(np.shape(img.data if hasattr(img, "data") else img)) for img in images}
    if len(shapes) != 1:
        raise ValueError("images have mismatched dimensions")
    X = _flatten(images, mask)
    n = X.shape[0]
    s = np.zeros((n, n))
    for i in range(n):
        s[i, i + 1:] = -np.sum((X[i] - X[i + 1:]) ** 2, axis=1)
        s[i + 1:, i] = s[i, i + 1:]
    if preference is None:
        off = s[~np.eye(n, dtype=bool)]
        preference = float(np.median(off)) if off.size else 0.0
    np.fill_diagonal(s, preference)
    return SimilarityMatrix(s, float(preference))


def affinity_propagation(sim: SimilarityMatrix, damping: float = 0.9, max_iter: int = 1000,
                         stable_iters: int = 50) -> ApResult:
    """Frey-Dueck responsibility/availability message passing, no jitter."""
    if not 0.5 <= damping < 1:
        raise ValueError("damping must be in [0.5, 1)")
    S = np.asarray(sim.s, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise ValueError("similarities must be finite")
    n = S.shape[0]
    if n == 1:
        return ApResult([0], np.array([0]), 0, True)
    R = np.zeros_like(S)
    A = np.zeros_like(S)
    rows = np.arange(n)
    last = None
    unchanged = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        AS = A + S
        first = np.argmax(AS, axis=1)
        y1 = AS[rows, first]
        AS[rows, first] = -np.inf
        y2 = np.max(AS, axis=1)
        Rn = S - y1[:, None]
        Rn[rows, first] = S[rows, first] - y2
        R = damping * R + (1 - damping) * Rn

        Rp = np.maximum(R, 0)
        Rp[rows, rows] = R[rows, rows]
        col = Rp.sum(axis=0)
        An = col[None, :] - Rp
        dA = An[rows, rows].copy()
        An = np.minimum(An, 0)
        An[rows, rows] = dA
        A = damping * A + (1 - damping) * An

        ex = tuple(np.flatnonzero(np.diag(A) + np.diag(R) > 0))
        if ex == last and ex:
            unchanged += 1
            if unchanged >= stable_iters:
                converged = True
                break
        else:
            unchanged = 1 if ex else 0
        last = ex

    exemplars = list(np.flatnonzero(np.diag(A) + np.diag(R) > 0))
    if not exemplars:
        exemplars = [int(np.argmax(np.diag(A) + np.diag(R)))]
    exemplars = [int(e) for e in exemplars]
    assignment = _assign(S, exemplars)
    return ApResult(exemplars, assignment, it, converged)


def _assign(S, exemplars):
    ex = np.asarray(exemplars)
    assignment = ex[np.argmax(S[:, ex], axis=1)]
    assignment[ex] = ex
    return assignment


def select_queries(groups, images, mask=None, threshold: int = SMALL_GROUP_THRESHOLD,
                   damping: float = 0.9, max_iter: int = 1000, stable_iters: int = 50,
                   explicit=None):
    """Query image indices (global) for group 1 and group 2.

    ``explicit`` maps a group label to query indices local to that group
    and overrides clustering for it.
    """
    groups = np.asarray(groups)
    explicit = explicit or {}
    out = []
    for g in (1, 2):
        members = np.flatnonzero(groups == g)
        if len(members) == 0:
            raise ValueError(f"group {g} is empty")
        if g in explicit and explicit[g]:
            local = [int(i) for i in explicit[g]]
            if min(local) < 0 or max(local) >= len(members):
                raise ValueError(f"explicit query index out of range for group {g}")
            out.append([int(members[i]) for i in local])
        elif len(members) <= threshold:
            out.append([int(m) for m in members])
        else:
            sim = similarity_matrix([images[m] for m in members], mask)
            res = affinity_propagation(sim, damping, max_iter, stable_iters)
            out.append([int(members[e]) for e in res.exemplar_indices])
    return out[0], out[1]


class ExemplarSelector(ClusterMixin, BaseEstimator):
    """Affinity-propagation clustering of images with a scikit-learn interface.

    Parameters
    ----------
    damping : float, default=0.9
    max_iter : int, default=1000
    stable_iters : int, default=50
    preference : float or None, default=None
        Diagonal similarity; None uses the median off-diagonal similarity.

    Attributes
    ----------
    exemplar_indices_ : list of int
    labels_ : ndarray of shape (n_samples,)
        Cluster number (position in ``exemplar_indices_``) of every sample.
    cluster_centers_ : ndarray
    n_iter_ : int
    converged_ : bool
    """

    def __init__(self, damping=0.9, max_iter=1000, stable_iters=50, preference=None):
        self.damping = damping
        self.max_iter = max_iter
        self.stable_iters = stable_iters
        self.preference = preference

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        X2 = X.reshape(len(X), -1)
        sim = similarity_matrix(list(X2), preference=self.preference)
        res = affinity_propagation(sim, self.damping, self.max_iter, self.stable_iters)
        self.exemplar_indices_ = res.exemplar_indices
        self.cluster_centers_ = X2[res.exemplar_indices]
        pos = {e: k for k, e in enumerate(res.exemplar_indices)}
        self.labels_ = np.array([pos[int(a)] for a in res.assignment])
        self.n_iter_ = res.iterations_run
        self.converged_ = res.converged
        return self

    def predict(self, X):
        X2 = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        d = ((X2[:, None, :] - self.cluster_centers_[None]) ** 2).sum(-1)
        return np.argmin(d, axis=1)
