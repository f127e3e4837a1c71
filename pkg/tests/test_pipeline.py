import json

import numpy as np
import pytest

from bbstat.blockmatch import valid_center_mask
from bbstat.corevol import Volume, load_mask, load_volume
from bbstat.pipeline import (
    ConfigError, RunConfig, SweepConfig, compare_arrays, render_slices, run_compare,
    run_synth_experiment,
)
from bbstat.stats import GroupSamples, PermutationPlan, permutation_test
from bbstat.synth import default_spec, make_cohorts, write_cohorts

OUTPUTS = ["raw_p.bvol", "adj_p.bvol", "one_minus_p.bvol", "sig_mask.bvol", "statistic.bvol",
           "report.json"]


def test_standard_matches_hand_wired_test():
    c, p, _ = make_cohorts(default_spec(16), 2, 2, 8.0, seed=4)
    data = np.stack([v.data for v in c + p])
    groups = np.array([1, 1, 2, 2])
    res = compare_arrays(data, groups, RunConfig(method="standard", B=200, seed=9))
    plan = PermutationPlan(200, 9)
    for x in map(tuple, np.argwhere(res.tested)):
        vals = data[(slice(None),) + x]
        r = permutation_test(GroupSamples(np.ones(2), vals[:2], [0, 1]),
                             GroupSamples(np.ones(2), vals[2:], [2, 3]), plan)
        assert res.raw_p[x] == r.p_raw


def test_zero_search_unit_weight_bbs_equals_standard(toy_cohort):
    data, groups, _ = toy_cohort
    std = compare_arrays(data, groups, RunConfig(method="standard", B=300, seed=2))
    bbs = compare_arrays(data, groups, RunConfig(method="bbs", search_radius=0,
                                                 unit_weights=True, L=8, B=300, seed=2))
    np.testing.assert_array_equal(std.raw_p, bbs.raw_p)
    np.testing.assert_array_equal(std.tested, bbs.tested)


def test_untested_voxels_have_unit_p(toy_cohort):
    data, groups, _ = toy_cohort
    res = compare_arrays(data, groups, RunConfig(B=100))
    assert np.all(res.raw_p[~res.tested] == 1) and np.all(res.adjusted_p[~res.tested] == 1)
    assert not res.significant[~res.tested].any()
    assert np.all(res.adjusted_p >= res.raw_p)
    assert res.raw_p[res.tested].min() >= 1 / 101


def test_analysis_mask_respects_user_mask(toy_cohort):
    data, groups, _ = toy_cohort
    m = valid_center_mask((16, 16, 1), 1, 2)
    m[:8] = False
    res = compare_arrays(data, groups, RunConfig(B=50), mask=m)
    assert not res.tested[:8].any() and res.tested[8:].any()


def test_bbs_detects_lesions():
    c, p, truth = make_cohorts(default_spec(32), 8, 8, 6.0, seed=1)
    data = np.stack([v.data for v in c + p])
    res = compare_arrays(data, np.array([1] * 8 + [2] * 8), RunConfig(B=500, correction="none"))
    hits = res.significant & truth.data
    assert hits.sum() > 0.3 * truth.data[res.tested].sum()


def test_run_compare_outputs_and_determinism(toy_manifest, tmp_path):
    outs = []
    for k in range(2):
        cfg = RunConfig(manifest=str(toy_manifest), out=str(tmp_path / f"o{k}"), B=200, seed=3)
        run_compare(cfg)
        outs.append(tmp_path / f"o{k}")
    for name in OUTPUTS[:-1]:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    reports = [json.loads((o / "report.json").read_text()) for o in outs]
    for r in reports:
        r["config"].pop("out")
    assert reports[0] == reports[1]
    assert (outs[0] / "timings.json").exists()
    rep = json.loads((outs[0] / "report.json").read_text())
    assert rep["seed"] == 3
    adj = load_volume(outs[0] / "adj_p.bvol")
    one_minus = load_volume(outs[0] / "one_minus_p.bvol")
    np.testing.assert_allclose(one_minus.data, 1 - adj.data, atol=1e-6)
    sig = load_mask(outs[0] / "sig_mask.bvol")
    assert sig.count() == rep["n_significant"]


def test_config_echo_reruns_identically(toy_manifest, tmp_path):
    cfg = RunConfig(manifest=str(toy_manifest), out=str(tmp_path / "a"), B=100, seed=8)
    run_compare(cfg)
    echo = json.loads((tmp_path / "a" / "report.json").read_text())["config"]
    echo["out"] = str(tmp_path / "b")
    run_compare(RunConfig.from_dict(echo))
    for name in ("raw_p.bvol", "adj_p.bvol", "sig_mask.bvol"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_worker_invariance(toy_manifest, tmp_path):
    for w in (1, 8):
        run_compare(RunConfig(manifest=str(toy_manifest), out=str(tmp_path / f"w{w}"), B=200,
                              seed=5, workers=w))
    for name in OUTPUTS:
        a = (tmp_path / "w1" / name).read_bytes()
        b = (tmp_path / "w8" / name).read_bytes()
        if name == "report.json":
            a = json.loads(a)
            b = json.loads(b)
            a["config"].pop("workers"), b["config"].pop("workers")
            a["config"].pop("out"), b["config"].pop("out")
        assert a == b, name


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(alpha=1.5), dict(method="x"),
                                dict(correction="holm"), dict(B=0), dict(mode="voxel")])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"alpah": 0.1})


def test_render_slices(tmp_path):
    arr = np.zeros((2, 1, 3, 1))
    arr[:, :, 1] = 1.0
    arr[1, 0, 2] = 0.5
    paths = render_slices(Volume(arr), tmp_path / "r")
    assert len(paths) == 3
    bodies = []
    for p in paths:
        raw = p.read_bytes()
        assert raw.startswith(b"P5\n2 1\n255\n")
        bodies.append(list(raw[len(b"P5\n2 1\n255\n"):]))
    assert bodies == [[0, 0], [255, 255], [0, 128]]


def test_minimal_sweep(tmp_path):
    sweep = SweepConfig(noise_levels=(8.0,), sample_sizes=(4,), repetitions=1,
                        methods=("bbs",), B=50, phantom_size=16)
    rows, table = run_synth_experiment(sweep, tmp_path)
    assert len(rows) == 1
    lines = (tmp_path / "metrics.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + 3


def test_unbalanced_sweep_fixes_controls():
    seen = []
    sweep = SweepConfig(noise_levels=(8.0,), sample_sizes=(3, 5), balanced=False,
                        n_control_fixed=6, repetitions=1, methods=("bbs",), B=20,
                        phantom_size=16)
    rows, _ = run_synth_experiment(
        sweep, None, lambda rep, noise, size, label, row, res: seen.append(res.queries))
    assert [r.sample_size for r in rows] == [3, 5]
    # small groups use every member as a query: 6 controls, then the patients
    assert seen[0] == ([0, 1, 2, 3, 4, 5], [6, 7, 8])
    assert seen[1] == ([0, 1, 2, 3, 4, 5], [6, 7, 8, 9, 10])
