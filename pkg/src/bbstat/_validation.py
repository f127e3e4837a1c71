"""Input checks shared by the estimator and the pipeline."""

import numpy as np

from .corevol import Mask, Volume


def check_cohort(X, y):
    """Return ``(data, groups)`` with data (M, nx, ny, nz, C) and groups in {1, 2}.

    ``X`` may be a list of :class:`Volume` or an array of shape
    (M, nx, ny[, nz][, C]); 2D images get a singleton z axis.  ``y`` may use
    any two labels: the smaller one becomes group 1.
    """
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], Volume):
        shapes = {v.data.shape for v in X}
        if len(shapes) != 1:
            raise ValueError(f"volumes differ in shape: {sorted(shapes)}")
        data = np.stack([v.data for v in X])
    else:
        data = np.asarray(X, dtype=np.float64)
        if data.ndim == 3:
            data = data[:, :, :, None, None]
        elif data.ndim == 4:
            data = data[..., None]
        if data.ndim != 5:
            raise ValueError(f"X must have 3 to 5 dimensions, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("X contains NaN or infinite values")
    y = np.asarray(y).reshape(-1)
    if len(y) != len(data):
        raise ValueError(f"X has {len(data)} images but y has {len(y)} labels")
    labels = np.unique(y)
    if len(labels) != 2:
        raise ValueError(f"y must contain exactly two groups, got {labels.tolist()}")
    groups = np.where(y == labels[0], 1, 2)
    return data, groups


def check_mask(mask, dims):
    if mask is None:
        return None
    arr = mask.data if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    if arr.ndim == len(dims) - 1:
        arr = arr[..., None]
    if arr.shape != tuple(dims):
        raise ValueError(f"mask shape {arr.shape} does not match image dims {tuple(dims)}")
    return arr
