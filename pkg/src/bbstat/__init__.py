"""Block-based voxel-wise statistics for two-group comparison of multichannel images."""

from .blockmatch import MatchConfig, match_cohort
from .corevol import BVOLError, Mask, Volume, load_manifest, load_mask, load_volume, save_mask, save_volume
from .estimator import BlockBasedComparison
from .multiplicity import bh_fdr, bonferroni, stepdown_minp
from .pipeline import RunConfig, SweepConfig, compare_arrays, run_compare, run_synth_experiment
from .stats import PermutationPlan, hotelling_t2, permutation_test

__version__ = "0.1.0"

__all__ = [
    "BVOLError",
    "BlockBasedComparison",
    "Mask",
    "MatchConfig",
    "PermutationPlan",
    "RunConfig",
    "SweepConfig",
    "Volume",
    "bh_fdr",
    "bonferroni",
    "compare_arrays",
    "hotelling_t2",
    "load_manifest",
    "load_mask",
    "load_volume",
    "match_cohort",
    "permutation_test",
    "run_compare",
    "run_synth_experiment",
    "save_mask",
    "save_volume",
    "stepdown_minp",
]
