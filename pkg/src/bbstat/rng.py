"""Counter-based random numbers keyed by integer tuples.

Permutation labels come from a vectorized Philox4x32-10 evaluated directly
on counters ``(item, b, voxel)``, so the b-th relabeling of a voxel is a
pure function of ``(seed, b, voxel)``; any worker can produce any column
without coordination.  :func:`stream` wraps numpy's Philox generator for
sequential draws (phantom jitter and noise).
"""

import numpy as np

__all__ = ["philox4x32", "stream", "uniform_keys", "relabelings"]

_MASK64 = (1 << 64) - 1
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_LO = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function.

    Parameters
    ----------
    counter : sequence of 4 uint32 arrays (broadcastable)
    key : sequence of 2 uint32 scalars or arrays

    Returns
    -------
    tuple of 4 uint64 arrays holding 32-bit outputs
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _LO for c in counter)
    k0, k1 = (np.asarray(k, dtype=np.uint64) & _LO for k in key)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _LO
            k1 = (k1 + _W1) & _LO
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _S32) ^ c1 ^ k0,
            p1 & _LO,
            (p0 >> _S32) ^ c3 ^ k1,
            p0 & _LO,
        )
    return c0, c1, c2, c3


def _seed_key(seed):
    words = np.random.SeedSequence([int(seed) & _MASK64]).generate_state(2, np.uint32)
    return int(words[0]), int(words[1])


def stream(*key) -> np.random.Generator:
    """Independent sequential generator for the integer tuple ``key``."""
    words = [int(k) & _MASK64 for k in key]
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))


def uniform_keys(seed, n_items, n_perm, voxels=None):
    """64-bit random keys, shape ([V,] n_perm, n_items).

    Entry ``[v, b, i]`` depends only on ``(seed, b, i, voxels[v])``.
    """
    k = _seed_key(seed)
    items = np.arange(n_items, dtype=np.uint64)[None, :]
    cols = np.arange(1, n_perm + 1, dtype=np.uint64)[:, None]
    if voxels is None:
        out = philox4x32((items, cols, 0, 0), k)
        return (out[0] << _S32) | out[1]
    vox = np.asarray(voxels, dtype=np.uint64).reshape(-1, 1, 1) + np.uint64(1)
    out = philox4x32((items[None], cols[None], vox & _LO, vox >> _S32), k)
    return (out[0] << _S32) | out[1]


def relabelings(seed: int, n_items: int, n_first: int, n_perm: int, voxel=None) -> np.ndarray:
    """Boolean labels of random splits: ``n_first`` items per row go to group 1.

    Row ``b`` is a uniformly random subset, a function of ``(seed, b)``
    only, or of ``(seed, b, voxel)`` when ``voxel`` is given.  With an
    array of voxels the result has shape (V, n_perm, n_items).
    """
    scalar = voxel is not None and np.ndim(voxel) == 0
    keys = uniform_keys(seed, n_items, n_perm, None if voxel is None else np.atleast_1d(voxel))
    order = np.argsort(keys, axis=-1, kind="stable")
    out = np.zeros(keys.shape, dtype=bool)
    np.put_along_axis(out, order[..., :n_first], True, axis=-1)
    return out[0] if scalar else out
