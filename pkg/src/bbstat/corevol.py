"""Vector-valued volumes, masks, dataset manifests and the BVOL codec.

A BVOL file is one JSON header line followed by little-endian float32
payload, x varying fastest, then y, then z, channels contiguous per voxel.
In memory, volumes are stored as float64 arrays of shape (nx, ny, nz, C).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "BVOLError",
    "Volume",
    "Mask",
    "DatasetManifest",
    "BlockVector",
    "load_volume",
    "save_volume",
    "load_mask",
    "save_mask",
    "load_manifest",
    "save_manifest",
    "extract_block",
    "block_offsets",
]


class BVOLError(ValueError):
    """Raised for malformed BVOL files or invalid volume contents."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense vector-valued 3D image.

    Parameters
    ----------
    data : ndarray, shape (nx, ny, nz, C)
        Voxel values. Copied to a read-only float64 array.
    voxel_size : tuple of float
        Voxel spacing in mm. Metadata only.
    """

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[..., np.newaxis]
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise BVOLError(f"volume data must have shape (nx, ny, nz, C), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise BVOLError("volume contains non-finite values")
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise BVOLError(f"voxel_size must be 3 positive reals, got {self.voxel_size}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size", vs)

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.data.shape[3])

    @property
    def is_2d(self) -> bool:
        return self.data.shape[2] == 1

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and self.voxel_size == other.voxel_size
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Mask:
    """Boolean voxel mask of shape (nx, ny, nz)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=bool)
        if arr.ndim == 2:
            arr = arr[..., np.newaxis]
        if arr.ndim != 3:
            raise BVOLError(f"mask data must have shape (nx, ny, nz), got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)

    def count(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass
class DatasetManifest:
    """List of (path, group) entries with an optional mask and query lists.

    ``queries`` maps group label (1 or 2) to explicit query-image indices
    local to that group; groups absent from it fall back to clustering.
    """

    entries: list
    mask: str | None = None
    queries: dict = field(default_factory=dict)

    def __post_init__(self):
        entries = []
        for path, group in self.entries:
            group = int(group)
            if group not in (1, 2):
                raise ValueError(f"group must be 1 or 2, got {group}")
            entries.append((str(path), group))
        self.entries = entries
        if not self.group_indices(1) or not self.group_indices(2):
            raise ValueError("manifest needs at least one image in each group")
        self.queries = {int(g): [int(i) for i in idx] for g, idx in (self.queries or {}).items()}

    @property
    def groups(self) -> np.ndarray:
        return np.array([g for _, g in self.entries], dtype=np.int64)

    @property
    def paths(self) -> list:
        return [p for p, _ in self.entries]

    def group_indices(self, group: int) -> list:
        return [i for i, (_, g) in enumerate(self.entries) if g == group]

    @property
    def M(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class BlockVector:
    """Lexicographically ordered block values around ``center``."""

    values: np.ndarray
    center: tuple
    source_image: int = -1


def _header(vol: Volume) -> bytes:
    nx, ny, nz = vol.dims
    header = {
        "dims": [nx, ny, nz],
        "channels": vol.channels,
        "voxel_size": list(vol.voxel_size),
        "dtype": "f32le",
    }
    return (json.dumps(header, separators=(",", ":")) + "\n").encode("ascii")


def _to_payload(data: np.ndarray) -> bytes:
    # (nx, ny, nz, C) -> x fastest: Fortran order over spatial axes, channels innermost
    arr = np.transpose(data, (2, 1, 0, 3)).astype("<f4")
    return np.ascontiguousarray(arr).tobytes()


def save_volume(vol: Volume, path) -> None:
    """Write ``vol`` as BVOL. Output bytes depend only on the volume."""
    if not isinstance(vol, Volume):
        vol = Volume(vol)
    payload_f32 = vol.data.astype("<f4")
    if not np.all(np.isfinite(payload_f32)):
        raise BVOLError("volume values overflow float32")
    blob = _header(vol) + _to_payload(vol.data)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_volume(path) -> Volume:
    """Read a BVOL file written by :func:`save_volume`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise BVOLError("malformed header: missing newline")
    try:
        header = json.loads(blob[:nl].decode("ascii"))
        dims = [int(d) for d in header["dims"]]
        channels = int(header["channels"])
        voxel_size = tuple(float(v) for v in header.get("voxel_size", (1.0, 1.0, 1.0)))
        dtype = header.get("dtype", "f32le")
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise BVOLError(f"malformed header: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1 or channels < 1:
        raise BVOLError(f"malformed header: dims={dims} channels={channels}")
    if dtype != "f32le":
        raise BVOLError(f"malformed header: unsupported dtype {dtype!r}")
    payload = blob[nl + 1:]
    expected = dims[0] * dims[1] * dims[2] * channels * 4
    if len(payload) != expected:
        raise BVOLError(
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise BVOLError("payload contains non-finite values")
    arr = flat.reshape(dims[2], dims[1], dims[0], channels).transpose(2, 1, 0, 3)
    return Volume(arr, voxel_size)


def save_mask(mask: Mask, path, voxel_size=(1.0, 1.0, 1.0)) -> None:
    save_volume(Volume(mask.data.astype(np.float64), voxel_size), path)


def load_mask(path) -> Mask:
    vol = load_volume(path)
    if vol.channels != 1:
        raise BVOLError(f"mask must have one channel, got {vol.channels}")
    return Mask(vol.data[..., 0] != 0)


def load_manifest(path) -> DatasetManifest:
    """Read a manifest JSON; relative paths resolve against its directory."""
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    base = path.parent

    def resolve(p):
        p = Path(p)
        return str(p if p.is_absolute() else base / p)

    entries = [(resolve(item["path"]), item["group"]) for item in doc["images"]]
    mask = resolve(doc["mask"]) if doc.get("mask") else None
    queries = {int(k): v for k, v in (doc.get("queries") or {}).items()}
    return DatasetManifest(entries, mask=mask, queries=queries)


def save_manifest(manifest: DatasetManifest, path, relative_to=None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent

    def rel(p):
        try:
            return os.path.relpath(p, base)
        except ValueError:
            return str(p)

    doc = {"images": [{"path": rel(p), "group": g} for p, g in manifest.entries]}
    if manifest.mask:
        doc["mask"] = rel(manifest.mask)
    if manifest.queries:
        doc["queries"] = {str(k): v for k, v in sorted(manifest.queries.items())}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def block_offsets(radius: int, is_2d: bool) -> np.ndarray:
    """Integer offsets of a cubic (or square, in 2D) neighborhood.

    Rows are in lexicographic (dx, dy, dz) order.
    """
    r = range(-radius, radius + 1)
    zr = range(0, 1) if is_2d else r
    return np.array([(dx, dy, dz) for dx in r for dy in r for dz in zr], dtype=np.int64)


def extract_block(vol: Volume, center, block_radius: int) -> BlockVector:
    """Return the block around ``center`` as a flat vector of length d*C."""
    if block_radius < 0:
        raise ValueError("block_radius must be nonnegative")
    center = tuple(int(c) for c in center)
    if len(center) == 2:
        center = center + (0,)
    r = block_radius
    rz = 0 if vol.is_2d else r
    lo = (center[0] - r, center[1] - r, center[2] - rz)
    hi = (center[0] + r, center[1] + r, center[2] + rz)
    if min(lo) < 0 or any(h >= d for h, d in zip(hi, vol.dims)):
        raise IndexError(f"block of radius {r} at {center} exceeds volume bounds {vol.dims}")
    sub = vol.data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1, :]
    return BlockVector(sub.reshape(-1).copy(), center)
