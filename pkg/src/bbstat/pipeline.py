"""End-to-end group comparison and the synthetic benchmark sweep."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .blockmatch import (
    MatchConfig,
    default_K,
    default_L,
    estimate_sigma,
    make_bandwidth,
    match_cohort,
    valid_center_mask,
    CohortSamples,
)
from .corevol import Mask, Volume, load_manifest, load_mask, load_volume, save_mask, save_volume
from .evaluation import contingency, experiment_table, metrics, write_table_csv
from .multiplicity import (
    StatMatrix,
    bh_fdr,
    bonferroni,
    no_correction,
    stepdown_minp,
    threshold_map,
)
from .refselect import SMALL_GROUP_THRESHOLD, select_queries
from .stats import PermutationPlan, cohort_permutation_test

__all__ = [
    "ConfigError",
    "DataError",
    "RunConfig",
    "ComparisonResult",
    "compare_arrays",
    "run_compare",
    "SweepConfig",
    "run_synth_experiment",
    "render_slices",
]

logger = logging.getLogger(__name__)

METHODS = ("bbs", "standard")
CORRECTIONS = ("minp", "bonferroni", "bh", "none")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    """Settings of one group comparison.

    ``method="standard"`` runs the plain voxel-wise permutation test: one
    unit-weight sample per image, no search.
    """

    manifest: str | None = None
    out: str | None = None
    method: str = "bbs"
    alpha: float = 0.01
    correction: str = "minp"
    block_radius: int = 1
    search_radius: int = 2
    K: int | None = None
    L: int | None = None
    sigma: float | str = "estimate"
    unit_weights: bool = False
    h_space: float | None = None
    B: int = 2000
    seed: int = 0
    mode: str = "image_level"
    minp_null_includes_observed: bool = False
    query_threshold: int = SMALL_GROUP_THRESHOLD
    ap_damping: float = 0.9
    ap_max_iter: int = 1000
    ap_stable_iters: int = 50
    render: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.correction not in CORRECTIONS:
            raise ConfigError(f"correction must be one of {CORRECTIONS}, got {self.correction!r}")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")
        if self.B < 1:
            raise ConfigError("B must be positive")
        if self.mode not in ("image_level", "sample_level"):
            raise ConfigError(f"unknown permutation mode {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        try:
            self.match_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls.from_dict(doc)
        base = Path(path).parent
        if cfg.manifest and not Path(cfg.manifest).is_absolute():
            cfg.manifest = str(base / cfg.manifest)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def match_config(self) -> MatchConfig:
        if self.method == "standard":
            return MatchConfig(self.block_radius, 0, None, None, 1.0, True, self.h_space)
        return MatchConfig(self.block_radius, self.search_radius, self.K, self.L,
                           self.sigma, self.unit_weights, self.h_space)

    def plan(self) -> PermutationPlan:
        return PermutationPlan(self.B, self.seed, self.mode)


@dataclass
class ComparisonResult:
    """Maps and bookkeeping of one comparison (arrays have shape (nx, ny, nz))."""

    statistic: np.ndarray
    raw_p: np.ndarray
    adjusted_p: np.ndarray
    significant: np.ndarray
    analysis_mask: np.ndarray
    tested: np.ndarray
    n_untestable: int
    queries: tuple
    sigma: float | None
    K: int | None
    L: int
    timings: dict = field(default_factory=dict)
    replicates: np.ndarray | None = None


def _standard_samples(data, groups, voxels) -> CohortSamples:
    """One unit-weight sample per image: the image's own voxel vector."""
    vals = data[:, voxels[:, 0], voxels[:, 1], voxels[:, 2], :]      # (M, V, C)
    vals = np.transpose(vals, (1, 0, 2))
    V, M, _ = vals.shape
    ones = np.ones((V, M))
    return CohortSamples(voxels, ones.copy(), ones, vals.copy(), vals * vals,
                         np.ones(V, dtype=bool), ones.copy(), vals.copy(),
                         np.asarray(groups) == 1)


def compare_arrays(data, groups, cfg: RunConfig, mask=None, keep_replicates=False,
                   explicit_queries=None) -> ComparisonResult:
    """Run a comparison on an in-memory cohort.

    Parameters
    ----------
    data : ndarray, shape (M, nx, ny, nz, C)
    groups : array of int (1 or 2), shape (M,)
    cfg : RunConfig
    mask : bool array (nx, ny, nz) or Mask, optional
    explicit_queries : dict, optional
        Group label -> query indices local to that group; overrides clustering.
    """
    t0 = time.perf_counter()
    timings = {}
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 4:
        data = data[..., None]
    groups = np.asarray(groups, dtype=np.int64)
    if data.ndim != 5 or data.shape[0] != len(groups):
        raise DataError("data must be (M, nx, ny, nz, C) with one group label per image")
    if not np.all(np.isfinite(data)):
        raise DataError("data contains non-finite values")
    m1, m2 = int(np.sum(groups == 1)), int(np.sum(groups == 2))
    if m1 + m2 != len(groups):
        raise DataError("group labels must be 1 or 2")
    if m1 < 2 or m2 < 2:
        raise DataError(f"need at least 2 images per group, got {m1} and {m2}")
    dims = data.shape[1:4]
    mcfg = cfg.match_config()

    analysis = valid_center_mask(dims, mcfg.block_radius, mcfg.search_radius)
    user_mask = None
    if mask is not None:
        user_mask = mask.data if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
        if user_mask.ndim == 2:
            user_mask = user_mask[..., None]
        if user_mask.shape != dims:
            raise DataError(f"mask dims {user_mask.shape} do not match images {dims}")
        analysis &= user_mask
    voxels = np.argwhere(analysis)
    if len(voxels) == 0:
        raise DataError("analysis mask is empty")
    images = [Volume(d) for d in data]

    sigma = None
    K = None
    q1, q2 = [], []
    if cfg.method == "standard":
        L = max(m1, m2)
        samples = _standard_samples(data, groups, voxels)
    else:
        ts = time.perf_counter()
        q1, q2 = select_queries(groups, images, None if user_mask is None else Mask(user_mask),
                                cfg.query_threshold, cfg.ap_damping, cfg.ap_max_iter,
                                cfg.ap_stable_iters, explicit=explicit_queries)
        timings["refselect"] = time.perf_counter() - ts
        C = data.shape[-1]
        block_len = (2 * mcfg.block_radius + 1) ** (2 if dims[2] == 1 else 3) * C
        if mcfg.sigma == "estimate":
            ref = images[q1[0]]
            try:
                sigma = estimate_sigma(ref, None if user_mask is None else Mask(user_mask))
            except ValueError:
                if user_mask is None:
                    raise
                logger.warning("mask too small for noise estimation; using the whole image")
                sigma = estimate_sigma(ref)
        else:
            sigma = float(mcfg.sigma)
        value_range = float(data.max() - data.min())
        bw = make_bandwidth(sigma, block_len, mcfg.search_radius, value_range, mcfg.h_space)
        K = mcfg.K if mcfg.K is not None else default_K(len(q1), len(q2))
        K = min(K, len(q1) + len(q2))
        n_off = (2 * mcfg.search_radius + 1) ** (2 if dims[2] == 1 else 3)
        L = mcfg.L if mcfg.L is not None else default_L(m1, m2, n_off)
        mcfg = replace(mcfg, K=K, L=L)
        ts = time.perf_counter()
        samples = match_cohort(data, groups, list(q1) + list(q2), voxels, mcfg, bw)
        timings["blockmatch"] = time.perf_counter() - ts

    ts = time.perf_counter()
    observed, reps, p_raw = cohort_permutation_test(
        samples.count, samples.wsum, samples.wp, samples.wpp, groups == 1, cfg.plan(),
        samples=samples.samples if cfg.mode == "sample_level" else None,
        voxel_ids=np.ravel_multi_index(tuple(voxels.T), dims), n_jobs=cfg.workers)
    timings["permutation"] = time.perf_counter() - ts

    testable = samples.testable
    idx = voxels[testable]
    ts = time.perf_counter()
    raw_t = p_raw[testable]
    if cfg.correction == "minp":
        pv = stepdown_minp(StatMatrix(reps[testable], observed[testable]), raw_t,
                           include_observed=cfg.minp_null_includes_observed, voxel_index=idx)
    elif cfg.correction == "bonferroni":
        pv = bonferroni(raw_t, idx)
    elif cfg.correction == "bh":
        pv = bh_fdr(raw_t, idx)
    else:
        pv = no_correction(raw_t, idx)
    timings["multiplicity"] = time.perf_counter() - ts

    stat_map = np.zeros(dims)
    raw_map = np.ones(dims)
    adj_map = np.ones(dims)
    tested = np.zeros(dims, dtype=bool)
    sl = (idx[:, 0], idx[:, 1], idx[:, 2])
    stat_map[sl] = observed[testable]
    raw_map[sl] = pv.raw
    adj_map[sl] = pv.adjusted
    tested[sl] = True
    sig = threshold_map(pv, cfg.alpha, dims).data
    timings["total"] = time.perf_counter() - t0
    return ComparisonResult(
        statistic=stat_map, raw_p=raw_map, adjusted_p=adj_map, significant=sig,
        analysis_mask=analysis, tested=tested, n_untestable=int((~testable).sum()),
        queries=(list(q1), list(q2)), sigma=sigma, K=K, L=L, timings=timings,
        replicates=reps if keep_replicates else None,
    )


def _finite_stat(stat):
    # BVOL stores finite floats only; infinite statistics are capped
    return np.where(np.isfinite(stat), stat, float(np.finfo(np.float32).max))


def run_compare(cfg: RunConfig) -> dict:
    """Load a manifest, compare the two groups and write the output files.

    Files written under ``cfg.out``: raw_p.bvol, adj_p.bvol, one_minus_p.bvol,
    sig_mask.bvol, statistic.bvol, report.json and timings.json (plus PGM
    slices when ``cfg.render``).  Every file except timings.json is a
    deterministic function of the config.
    """
    if not cfg.manifest:
        raise ConfigError("config has no manifest")
    if not cfg.out:
        raise ConfigError("config has no output directory")
    t0 = time.perf_counter()
    try:
        manifest = load_manifest(cfg.manifest)
        vols = [load_volume(p) for p in manifest.paths]
        mask = load_mask(manifest.mask) if manifest.mask else None
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    shapes = {v.data.shape for v in vols}
    if len(shapes) != 1:
        raise DataError(f"volumes disagree in dims/channels: {sorted(shapes)}")
    data = np.stack([v.data for v in vols])
    load_time = time.perf_counter() - t0
    res = compare_arrays(data, manifest.groups, cfg, mask, explicit_queries=manifest.queries)
    res.timings["load"] = load_time

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    vs = vols[0].voxel_size
    save_volume(Volume(res.raw_p, vs), out / "raw_p.bvol")
    save_volume(Volume(res.adjusted_p, vs), out / "adj_p.bvol")
    save_volume(Volume(1.0 - res.adjusted_p, vs), out / "one_minus_p.bvol")
    save_volume(Volume(_finite_stat(res.statistic), vs), out / "statistic.bvol")
    save_mask(Mask(res.significant), out / "sig_mask.bvol", vs)
    report = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "n_images": [int(np.sum(manifest.groups == 1)), int(np.sum(manifest.groups == 2))],
        "n_tested": int(res.tested.sum()),
        "n_untestable": res.n_untestable,
        "n_significant": int(res.significant.sum()),
        "queries": {"group1": res.queries[0], "group2": res.queries[1]},
        "sigma": res.sigma,
        "K": res.K,
        "L": res.L,
        "min_raw_p": float(res.raw_p[res.tested].min()) if res.tested.any() else None,
        "files": ["raw_p.bvol", "adj_p.bvol", "one_minus_p.bvol", "sig_mask.bvol",
                  "statistic.bvol"],
    }
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "timings.json", "w") as fh:
        json.dump(res.timings, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg.render:
        render_slices(Volume(1.0 - res.adjusted_p, vs), out / "one_minus_p")
        render_slices(Volume(res.significant.astype(np.float64), vs), out / "sig_mask")
    report["timings"] = res.timings
    return report


def render_slices(vol: Volume, prefix) -> list:
    """One 8-bit PGM per z slice, values in [0, 1] mapped linearly to 0..255.

    Rounding is half-up, so 0.5 maps to 128.
    """
    if vol.channels != 1:
        raise ValueError("render_slices needs a single-channel volume")
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    img = np.clip(vol.data[..., 0], 0.0, 1.0)
    pix = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    nx, ny, nz = vol.dims
    for z in range(nz):
        path = Path(f"{prefix}_z{z:03d}.pgm")
        # rows are y, columns are x
        body = np.ascontiguousarray(pix[:, :, z].T).tobytes()
        with open(path, "wb") as fh:
            fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
            fh.write(body)
        paths.append(path)
    return paths


@dataclass
class SweepConfig:
    """Synthetic benchmark grid.

    In ``balanced`` mode both cohorts take each sample size; otherwise the
    control cohort is fixed at ``max(sample_sizes)`` (or ``n_control_fixed``)
    and only the patient count varies.
    """

    noise_levels: tuple = (6.0, 8.0, 10.0)
    sample_sizes: tuple = (10, 20, 30)
    balanced: bool = True
    n_control_fixed: int | None = None
    repetitions: int = 5
    methods: tuple = ("bbs", "standard")
    corrections: tuple = ("minp",)
    alpha: float = 0.01
    B: int = 2000
    seed: int = 0
    phantom_size: int = 64
    phantom: dict | None = None
    compare: dict = field(default_factory=dict)
    workers: int = 1
    save_masks: bool = False

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("noise_levels", "sample_sizes", "methods", "corrections"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def run_synth_experiment(sweep: SweepConfig, out=None, progress=None):
    """Generate cohorts, compare them, and score detections against the truth.

    Returns ``(rows, table)``: one :class:`~bbstat.evaluation.MetricRow` per
    (repetition, noise, size, method, correction) and the aggregated table.
    Cohorts of one repetition share a seed across methods, so methods are
    compared on identical data.
    """
    from .synth import PhantomSpec, default_spec, make_cohorts

    spec = PhantomSpec.from_dict(sweep.phantom) if sweep.phantom else default_spec(sweep.phantom_size)
    rows = []
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    base = RunConfig(**{"alpha": sweep.alpha, "B": sweep.B, "workers": sweep.workers,
                        **sweep.compare})
    eval_mask = valid_center_mask(spec.dims, base.block_radius, base.search_radius)
    n_max = sweep.n_control_fixed or max(sweep.sample_sizes)
    for rep in range(sweep.repetitions):
        for noise in sweep.noise_levels:
            data_seed = _cell_seed(sweep.seed, rep, noise)
            for size in sweep.sample_sizes:
                n_ctrl = size if sweep.balanced else n_max
                controls, patients, truth = make_cohorts(spec, n_ctrl, size, noise, data_seed)
                data = np.stack([v.data for v in controls + patients])
                groups = np.array([1] * len(controls) + [2] * len(patients))
                for method in sweep.methods:
                    for corr in sweep.corrections:
                        cfg = replace(base, method=method, correction=corr,
                                      seed=data_seed + 1)
                        res = compare_arrays(data, groups, cfg, mask=eval_mask)
                        table = contingency(res.significant, truth, eval_mask)
                        label = method if len(sweep.corrections) == 1 else f"{method}/{corr}"
                        row = metrics(table, size, label, noise)
                        rows.append(row)
                        if out is not None and sweep.save_masks:
                            save_mask(Mask(res.significant),
                                      out / f"mask_{label.replace('/', '-')}_n{size}"
                                            f"_th{noise:g}_r{rep}.bvol")
                        if progress is not None:
                            progress(rep, noise, size, label, row, res)
    table = experiment_table(rows)
    if out is not None:
        write_table_csv(table, out / "metrics.csv")
        with open(out / "report.json", "w") as fh:
            json.dump({"sweep": asdict(sweep), "n_rows": len(rows)}, fh, indent=2,
                      sort_keys=True, default=list)
            fh.write("\n")
    return rows, table


def _cell_seed(seed, rep, noise):
    return int(seed) * 1_000_003 + rep * 1009 + int(round(noise * 10))
