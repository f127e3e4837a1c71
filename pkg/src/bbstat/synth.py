"""Synthetic diffusion-weighted phantoms with simulated lesions.

A phantom is a 2D slice of diffusion tensors: an isotropic background
with anisotropic square "structures".  Subjects differ by random jitter of
structure location, size and orientation.  Patients additionally carry
circular lesions in which the two radial eigenvalues of the tensor are
inflated by a factor rho.  Signals follow the single-tensor model
S_i = s0 * exp(-b g_i^T D g_i), and Rician noise is added in the complex
domain.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .corevol import DatasetManifest, Mask, Volume, save_manifest, save_mask, save_volume
from .rng import stream

__all__ = [
    "Structure",
    "Lesion",
    "Jitter",
    "PhantomSpec",
    "PhantomTruth",
    "icosahedral_gradients",
    "default_spec",
    "generate_phantom",
    "dw_signal",
    "add_rician_noise",
    "make_cohorts",
    "write_cohorts",
]

_PHI = (1.0 + np.sqrt(5.0)) / 2.0


def icosahedral_gradients() -> np.ndarray:
    """Six unit directions through antipodal vertex pairs of an icosahedron."""
    g = np.array([
        [0, 1, _PHI], [0, 1, -_PHI],
        [1, _PHI, 0], [1, -_PHI, 0],
        [_PHI, 0, 1], [_PHI, 0, -1],
    ], dtype=np.float64)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(frozen=True)
class Structure:
    """Axis-aligned square of anisotropic tensors.

    ``angle`` is the in-plane principal direction in degrees from the x axis;
    ``eigenvalues`` are (principal, radial, radial) in mm^2/s.
    """

    center: tuple
    half_size: float
    angle: float
    eigenvalues: tuple = (1.7e-3, 0.3e-3, 0.3e-3)


@dataclass(frozen=True)
class Lesion:
    center: tuple
    radius: float
    rho: float = 2.0


@dataclass(frozen=True)
class Jitter:
    """Per-subject perturbation magnitudes (standard deviations, clipped)."""

    location: float = 1.0
    location_max: float = 2.0
    size: float = 0.75
    size_max: float = 1.5
    angle: float = 10.0
    lesion_location: float = 1.0
    lesion_location_max: float = 2.0
    lesion_radius: float = 0.5
    rho_range: tuple = (1.5, 2.5)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 1)
    gradients: tuple = field(default_factory=lambda: tuple(map(tuple, icosahedral_gradients())))
    b_value: float = 1000.0
    s0: float = 100.0
    background: float = 0.8e-3
    structures: tuple = ()
    lesions: tuple = ()
    jitter: Jitter = Jitter()

    def __post_init__(self):
        g = np.asarray(self.gradients, dtype=np.float64)
        if g.ndim != 2 or g.shape[1] != 3 or not np.allclose(np.linalg.norm(g, axis=1), 1.0):
            raise ValueError("gradients must be unit 3-vectors")
        if len(self.dims) != 3 or self.dims[2] != 1:
            raise ValueError("phantoms are 2D slices: dims must be (nx, ny, 1)")
        for les in self.lesions:
            if not les.rho > 1:
                raise ValueError("lesion swelling factor must exceed 1")
        for st in self.structures:
            cx, cy = st.center[:2]
            h = st.half_size
            if cx - h < 0 or cy - h < 0 or cx + h > self.dims[0] - 1 or cy + h > self.dims[1] - 1:
                raise ValueError(f"structure at {st.center} exceeds bounds {self.dims}")

    def without_lesions(self) -> "PhantomSpec":
        return replace(self, lesions=())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        doc = dict(doc)
        kw = {}
        if "dims" in doc:
            kw["dims"] = tuple(doc["dims"])
        if "gradients" in doc:
            kw["gradients"] = tuple(tuple(g) for g in doc["gradients"])
        for key in ("b_value", "s0", "background"):
            if key in doc:
                kw[key] = float(doc[key])
        if "structures" in doc:
            kw["structures"] = tuple(
                Structure(tuple(s["center"]), float(s["half_size"]), float(s["angle"]),
                          tuple(s.get("eigenvalues", Structure.eigenvalues)))
                for s in doc["structures"])
        if "lesions" in doc:
            kw["lesions"] = tuple(
                Lesion(tuple(les["center"]), float(les["radius"]), float(les.get("rho", 2.0)))
                for les in doc["lesions"])
        if "jitter" in doc:
            j = dict(doc["jitter"])
            if "rho_range" in j:
                j["rho_range"] = tuple(j["rho_range"])
            kw["jitter"] = Jitter(**j)
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_spec(size: int = 64) -> PhantomSpec:
    """Four oriented squares, lesions in three of them, on a size x size slice."""
    f = size / 64.0
    lo, hi = 17.0 * f - 0.5, 46.0 * f - 0.5
    h = 9.0 * f
    structures = (
        Structure((lo, lo), h, 0.0),
        Structure((lo, hi), h, 90.0),
        Structure((hi, lo), h, 45.0),
        Structure((hi, hi), h, 135.0),
    )
    r = 4.0 * f
    lesions = (
        Lesion((lo + 1.0 * f, lo + 1.0 * f), r),
        Lesion((hi - 1.0 * f, lo), r),
        Lesion((hi, hi + 1.0 * f), r),
    )
    return PhantomSpec(dims=(size, size, 1), structures=structures, lesions=lesions)


@dataclass
class PhantomTruth:
    """Tensor field (nx, ny, nz, 3, 3), lesion mask, and the DW volume once formed."""

    tensor_field: np.ndarray
    lesion_mask: Mask
    dw: Volume | None = None


def _clipped_normal(rng, sd, limit, size=None):
    if sd <= 0:
        return np.zeros(size) if size is not None else 0.0
    return np.clip(rng.normal(0.0, sd, size), -limit, limit)


def generate_phantom(spec: PhantomSpec, subject_rng=None) -> PhantomTruth:
    """Tensor field of one subject.

    With ``subject_rng=None`` no jitter is applied and the reference layout
    is produced.  The same number of random draws is taken whatever the
    lesion list, so structure jitter is identically distributed in
    controls and patients.
    """
    nx, ny, nz = spec.dims
    jit = spec.jitter
    xs, ys = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64),
                         indexing="ij")
    eig_field = np.empty((nx, ny, 3))
    eig_field[:] = spec.background
    angle_field = np.zeros((nx, ny))
    for st in spec.structures:
        if subject_rng is not None:
            dx, dy = _clipped_normal(subject_rng, jit.location, jit.location_max, 2)
            dh = _clipped_normal(subject_rng, jit.size, jit.size_max)
            da = subject_rng.normal(0.0, jit.angle) if jit.angle > 0 else 0.0
        else:
            dx = dy = dh = da = 0.0
        cx, cy = st.center[0] + dx, st.center[1] + dy
        h = max(st.half_size + dh, 0.5)
        inside = (np.abs(xs - cx) <= h) & (np.abs(ys - cy) <= h)
        eig_field[inside] = st.eigenvalues
        angle_field[inside] = st.angle + da

    truth = np.zeros((nx, ny), dtype=bool)
    for les in spec.lesions:
        truth |= (xs - les.center[0]) ** 2 + (ys - les.center[1]) ** 2 <= les.radius ** 2
    for les in spec.lesions:
        if subject_rng is not None:
            dx, dy = _clipped_normal(subject_rng, jit.lesion_location, jit.lesion_location_max, 2)
            dr = _clipped_normal(subject_rng, jit.lesion_radius, 2 * jit.lesion_radius)
            rho = subject_rng.uniform(*jit.rho_range)
        else:
            dx = dy = dr = 0.0
            rho = les.rho
        cx, cy = les.center[0] + dx, les.center[1] + dy
        r = max(les.radius + dr, 0.5)
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r ** 2
        eig_field[inside, 1:] *= rho

    t = np.deg2rad(angle_field)
    zero = np.zeros_like(t)
    e1 = np.stack([np.cos(t), np.sin(t), zero], -1)
    e2 = np.stack([-np.sin(t), np.cos(t), zero], -1)
    e3 = np.stack([zero, zero, zero + 1.0], -1)
    field = sum(eig_field[..., k, None, None] * e[..., :, None] * e[..., None, :]
                for k, e in enumerate((e1, e2, e3)))
    field = field[:, :, None]
    return PhantomTruth(field, Mask(truth[..., None]))


def dw_signal(truth_or_field, b: float, s0: float, gradients=None) -> Volume:
    """Noise-free diffusion-weighted volume, one channel per gradient."""
    field = truth_or_field.tensor_field if isinstance(truth_or_field, PhantomTruth) else \
        np.asarray(truth_or_field, dtype=np.float64)
    if b < 0:
        raise ValueError("b-value must be nonnegative")
    if gradients is None:
        gradients = icosahedral_gradients()
    g = np.asarray(gradients, dtype=np.float64)
    evals = np.linalg.eigvalsh(field.reshape(-1, 3, 3))
    if not np.all(evals > 0) or not np.allclose(field, np.swapaxes(field, -1, -2)):
        raise ValueError("tensor field is not symmetric positive definite")
    adc = np.einsum("ci,...ij,cj->...c", g, field, g)
    return Volume(s0 * np.exp(-b * adc))


def add_rician_noise(vol: Volume, theta_percent: float, v: float, noise_rng) -> Volume:
    """Magnitude of the signal plus complex Gaussian noise of sd v * theta / 100."""
    if theta_percent < 0 or not v > 0:
        raise ValueError("theta_percent must be >= 0 and v > 0")
    if theta_percent == 0:
        return Volume(vol.data.copy(), vol.voxel_size)
    sigma = v * theta_percent / 100.0
    n1 = noise_rng.normal(0.0, sigma, vol.data.shape)
    n2 = noise_rng.normal(0.0, sigma, vol.data.shape)
    return Volume(np.sqrt((vol.data + n1) ** 2 + n2 ** 2), vol.voxel_size)


def _subject(spec, group, index, seed, theta_percent, jitter=True):
    rng = stream(seed, group, index, 0) if jitter else None
    truth = generate_phantom(spec, rng)
    clean = dw_signal(truth, spec.b_value, spec.s0, spec.gradients)
    return add_rician_noise(clean, theta_percent, spec.s0, stream(seed, group, index, 1))


def make_cohorts(spec: PhantomSpec, n_control: int, n_patient: int, theta_percent: float,
                 seed: int = 0, jitter: bool = True):
    """Control and patient cohorts plus the reference lesion mask.

    Subject ``i`` of group ``g`` draws from streams keyed ``(seed, g, i)``,
    so a cohort of n subjects is a prefix of a larger one.
    """
    if n_control < 1 or n_patient < 1:
        raise ValueError("cohort sizes must be at least 1")
    controls = [_subject(spec.without_lesions(), 1, i, seed, theta_percent, jitter)
                for i in range(n_control)]
    patients = [_subject(spec, 2, i, seed, theta_percent, jitter) for i in range(n_patient)]
    truth = generate_phantom(spec, None).lesion_mask
    return controls, patients, truth


def write_cohorts(outdir, controls, patients, truth: Mask | None = None) -> Path:
    """Write BVOL volumes, the truth mask and ``manifest.json``; return its path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for g, vols in ((1, controls), (2, patients)):
        for i, vol in enumerate(vols):
            name = f"{'control' if g == 1 else 'patient'}_{i:03d}.bvol"
            save_volume(vol, outdir / name)
            entries.append((str(outdir / name), g))
    if truth is not None:
        save_mask(truth, outdir / "truth_mask.bvol")
    path = outdir / "manifest.json"
    save_manifest(DatasetManifest(entries), path)
    return path
