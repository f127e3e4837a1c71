"""Command-line entry points: ``compare``, ``synth`` and ``bench``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .pipeline import ConfigError, DataError, RunConfig, SweepConfig, run_compare, run_synth_experiment

logger = logging.getLogger("bbstat")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
WORKERS_ENV = "BBSTAT_WORKERS"


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def cmd_compare(args) -> int:
    cfg = RunConfig.from_json(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    elif "workers" not in _read_json(args.config):
        overrides["workers"] = _default_workers()
    if args.out is not None:
        overrides["out"] = args.out
    if args.manifest is not None:
        overrides["manifest"] = args.manifest
    cfg = replace(cfg, **overrides)
    report = run_compare(cfg)
    logger.info("tested %d voxels, %d significant, %d untestable",
                report["n_tested"], report["n_significant"], report["n_untestable"])
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import PhantomSpec, default_spec, make_cohorts, write_cohorts

    doc = _read_json(args.config) if args.config else {}
    phantom = doc.get("phantom")
    spec = PhantomSpec.from_dict(phantom) if phantom else default_spec(int(doc.get("size", 64)))
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    n_control = int(doc.get("n_control", 10))
    n_patient = int(doc.get("n_patient", 10))
    theta = float(doc.get("noise_percent", 6.0))
    jitter = bool(doc.get("jitter", True))
    controls, patients, truth = make_cohorts(spec, n_control, n_patient, theta, seed, jitter)
    out = Path(args.out or doc.get("out", "synth_out"))
    path = write_cohorts(out, controls, patients, truth)
    with open(out / "phantom.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, default=list)
        fh.write("\n")
    logger.info("wrote %d volumes and %s", n_control + n_patient, path)
    return EXIT_OK


def cmd_bench(args) -> int:
    sweep = SweepConfig.from_dict(_read_json(args.sweep))
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    sweep = replace(sweep, **overrides)
    out = Path(args.out or "bench_out")

    def progress(rep, noise, size, label, row, res):
        logger.info("rep %d noise %g%% n=%d %-10s dice %.3f sen %.3f spc %.4f (%.1fs)",
                    rep, noise, size, label, row.dice, row.sensitivity, row.specificity,
                    res.timings.get("total", 0.0))

    run_synth_experiment(sweep, out, progress)
    logger.info("wrote %s", out / "metrics.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbstat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compare", help="compare two groups listed in a manifest")
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--manifest", help="override the manifest path of the config")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help=f"worker threads (default ${WORKERS_ENV} or 1)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="generate a synthetic control/patient cohort")
    p.add_argument("--config", help="cohort JSON (phantom, n_control, n_patient, noise_percent)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="run the synthetic benchmark sweep")
    p.add_argument("--sweep", required=True, help="sweep JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except (AssertionError, FloatingPointError) as exc:
        logger.error("internal invariant violation: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
