"""scikit-learn style estimator for two-group voxel-wise comparison."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_cohort, check_mask
from .pipeline import RunConfig, compare_arrays


class BlockBasedComparison(BaseEstimator):
    """Voxel-wise group comparison with block matching and permutation inference.

    Parameters
    ----------
    method : {"bbs", "standard"}, default="bbs"
        ``"standard"`` is the plain voxel-wise permutation test.
    block_radius : int, default=1
        Block half-width (3x3x3 blocks).
    search_radius : int, default=2
        Search window half-width (5x5x5 window).
    K : int, default=None
        Number of nearest query blocks per candidate; None uses min(Q1, Q2).
    L : int, default=None
        Samples kept per group; None uses the package default.
    sigma : float or "estimate", default="estimate"
    unit_weights : bool, default=False
    h_space : float, default=None
        Spatial bandwidth; None uses half the search radius.
    n_permutations : int, default=2000
    permutation_mode : {"image_level", "sample_level"}, default="image_level"
    correction : {"minp", "bonferroni", "bh", "none"}, default="minp"
    alpha : float, default=0.01
    random_state : int, default=0
    n_jobs : int, default=1

    Attributes
    ----------
    statistic_ : ndarray (nx, ny, nz)
        Observed T^2 (0 where untested).
    pvalues_ : ndarray (nx, ny, nz)
        Raw permutation p-values (1 where untested).
    pvalues_adjusted_ : ndarray (nx, ny, nz)
    significance_mask_ : ndarray of bool (nx, ny, nz)
    tested_mask_ : ndarray of bool (nx, ny, nz)
    queries_ : tuple of two lists
    sigma_ : float or None
    n_untestable_ : int

    Examples
    --------
    >>> est = BlockBasedComparison(n_permutations=200).fit(images, labels)  # doctest: +SKIP
    >>> est.significance_mask_.sum()  # doctest: +SKIP
    """

    def __init__(self, method="bbs", block_radius=1, search_radius=2, K=None, L=None,
                 sigma="estimate", unit_weights=False, h_space=None, n_permutations=2000,
                 permutation_mode="image_level", correction="minp", alpha=0.01,
                 random_state=0, n_jobs=1):
        self.method = method
        self.block_radius = block_radius
        self.search_radius = search_radius
        self.K = K
        self.L = L
        self.sigma = sigma
        self.unit_weights = unit_weights
        self.h_space = h_space
        self.n_permutations = n_permutations
        self.permutation_mode = permutation_mode
        self.correction = correction
        self.alpha = alpha
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return RunConfig(
            method=self.method, alpha=self.alpha, correction=self.correction,
            block_radius=self.block_radius, search_radius=self.search_radius,
            K=self.K, L=self.L, sigma=self.sigma, unit_weights=self.unit_weights,
            h_space=self.h_space, B=self.n_permutations, seed=int(self.random_state),
            mode=self.permutation_mode, workers=self.n_jobs,
        )

    def fit(self, X, y, mask=None):
        """Compare the two groups of ``X`` labelled by ``y``.

        Parameters
        ----------
        X : list of Volume or array of shape (M, nx, ny[, nz][, C])
        y : array of shape (M,) with two distinct labels
        mask : bool array (nx, ny[, nz]), optional
        """
        data, groups = check_cohort(X, y)
        mask = check_mask(mask, data.shape[1:4])
        res = compare_arrays(data, groups, self._config(), mask)
        self.statistic_ = res.statistic
        self.pvalues_ = res.raw_p
        self.pvalues_adjusted_ = res.adjusted_p
        self.significance_mask_ = res.significant
        self.tested_mask_ = res.tested
        self.queries_ = res.queries
        self.sigma_ = res.sigma
        self.n_untestable_ = res.n_untestable
        self.K_ = res.K
        self.L_ = res.L
        return self

    def transform(self, X=None):
        """Display map 1 - adjusted p of the fitted comparison."""
        check_is_fitted(self, "pvalues_adjusted_")
        return 1.0 - self.pvalues_adjusted_

    def predict(self, X=None):
        """Significance mask of the fitted comparison."""
        check_is_fitted(self, "significance_mask_")
        return self.significance_mask_.copy()

    def fit_predict(self, X, y, mask=None):
        return self.fit(X, y, mask).predict()
