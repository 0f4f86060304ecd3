"""Command-line front end.

Exit codes: 0 success, 2 invalid input (config or scan file), 3 numerical
failure inside a run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, scenario_from_dict, scenario_to_dict, variant_from_name
from .errors import ContractError
from .harness import RunFailure, apply_sweep, models_for, run_filter, run_monte_carlo
from .metrics import OspaParams, ospa, position_error
from .report import (OSPA_STEPS_HEADER, VEHICLE_ERROR_HEADER, ScanFileError, write_csv, fmt,
                     read_scan_file, write_scan_file, write_tables)
from .rfs import estimate_features
from .sim import generate_scans, generate_trajectories, scans_by_step

log = logging.getLogger("mspmb")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_INVALID)
    note = " (derived default)" if cfg.seed_derived else ""
    print(f"config ok: {args.config}")
    print(f"config_hash: {cfg.config_hash()}")
    print(f"seeds: {list(cfg.seeds)}{note}")
    return EXIT_OK


def _manifest(cfg, files, outdir: Path) -> Path:
    manifest = {
        "software": {"name": "mspmb", "version": __version__, "numpy": np.__version__},
        "config_hash": cfg.config_hash(),
        "seeds": list(cfg.seeds),
        "seed_derived": cfg.seed_derived,
        "config": cfg.semantic_dict(),
        "files": sorted(Path(f).name for f in files),
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_INVALID)
    outdir = Path(args.out or cfg.output_dir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(f"output directory {outdir} is not writable: {exc.strerror}", EXIT_INVALID)
    log.info("running %d seed(s) x %d sweep point(s)", cfg.n_runs, max(len(cfg.sweep_values), 1))
    try:
        result = run_monte_carlo(cfg.scenario, cfg.variants, cfg.seeds, cfg.baselines,
                                 cfg.sweep_parameter, cfg.sweep_values or None, jobs=args.jobs,
                                 ospa_params=cfg.ospa)
    except RunFailure as exc:
        return _fail(str(exc), EXIT_NUMERICAL)
    files = write_tables(result, outdir, cfg.cdf_quantiles)
    if args.save_scans:
        files.extend(_save_scans(cfg, outdir / "scans"))
    if args.plots:
        from .plotting import render_all
        files.extend(render_all(outdir))
    _manifest(cfg, files, outdir)
    print(f"wrote {len(files) + 1} files to {outdir}")
    return EXIT_OK


def _save_scans(cfg, scan_dir: Path) -> list:
    scan_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    values = cfg.sweep_values or (None,)
    for i, value in enumerate(values):
        spec = apply_sweep(cfg.scenario, cfg.sweep_parameter, value)
        for run_id, seed in enumerate(cfg.seeds):
            truth = generate_trajectories(spec, seed)
            scans = generate_scans(truth, spec, seed)
            name = f"run{run_id:03d}.json" if value is None else f"point{i}_run{run_id:03d}.json"
            paths.append(write_scan_file(scan_dir / name, scenario_to_dict(spec), scans, truth,
                                         run_id=run_id, seed=seed, sweep_value=value))
    return paths


def cmd_replay(args) -> int:
    try:
        data = read_scan_file(args.scans)
        spec = scenario_from_dict(data["scenario"], source=f"{args.scans} scenario")
        if args.config:
            cfg = load_config(args.config)
            matches = [v for v in cfg.variants if v.name == args.variant]
            if not matches:
                raise ConfigError(f"no variant named {args.variant!r} in {args.config}", "variant")
            variant = matches[0]
            ospa_params = cfg.ospa
        else:
            variant = variant_from_name(args.variant)
            ospa_params = OspaParams()
    except (ScanFileError, ConfigError) as exc:
        return _fail(str(exc), EXIT_INVALID)
    except OSError as exc:
        return _fail(f"cannot read {exc.filename}: {exc.strerror}", EXIT_INVALID)

    scans, truth = data["scans"], data["truth"]
    vehicle_ids = {v.vehicle_id for v in spec.vehicles}
    unknown = {s.vehicle_id for s in scans} - vehicle_ids
    if unknown:
        return _fail(f"{args.scans}: scans from unknown vehicles {sorted(unknown)}", EXIT_INVALID)
    steps = scans_by_step(scans)
    outdir = Path(args.out or "replay")
    outdir.mkdir(parents=True, exist_ok=True)
    run_id, seed = data.get("run_id", 0), data.get("seed")
    sweep_value = fmt(data.get("sweep_value"))
    ospa_rows, err_rows = [], []
    try:
        with open(outdir / "states.jsonl", "w") as fh:
            for t, state in enumerate(run_filter(steps, models_for(spec), variant,
                                                 spec.vehicle_priors())):
                fh.write(json.dumps(state.to_dict(), separators=(",", ":")) + "\n")
                if truth is None:
                    continue
                est = estimate_features(state, variant.r_estimate)[:, :2]
                ospa_rows.append((run_id, seed, sweep_value, variant.name, t,
                                  fmt(ospa(est, truth.feature_positions(t), ospa_params))))
                for vid in sorted(vehicle_ids):
                    err = position_error(state.vehicles[vid].position, truth.vehicles[vid][t])
                    err_rows.append((run_id, seed, sweep_value, variant.name, vid, t, fmt(err)))
    except (ArithmeticError, np.linalg.LinAlgError, ContractError) as exc:
        return _fail(f"replay of {args.scans} (seed {seed}) failed: {exc}", EXIT_NUMERICAL)
    if truth is not None:
        err_rows.sort(key=lambda r: (r[4], r[5]))
        write_csv(outdir / "ospa_steps.csv", OSPA_STEPS_HEADER, ospa_rows)
        write_csv(outdir / "vehicle_error.csv", VEHICLE_ERROR_HEADER, err_rows)
    print(f"replayed {len(steps)} steps with {variant.name} into {outdir}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import render_all
    results = Path(args.results)
    if not results.is_dir():
        return _fail(f"{results} is not a directory", EXIT_INVALID)
    written = render_all(results, args.out)
    for p in written:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mspmb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte-Carlo experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--jobs", type=int, default=1,
                     help="worker processes (capped by MSPMB_MAX_JOBS)")
    run.add_argument("--out", help="output directory (default: output_dir from the config)")
    run.add_argument("--save-scans", action="store_true",
                     help="also write every run's scans for replay")
    run.add_argument("--plots", action="store_true", help="render PNG figures next to the CSVs")
    run.set_defaults(func=cmd_run)

    replay = sub.add_parser("replay", help="run one filter over a recorded scan file")
    replay.add_argument("--scans", required=True)
    replay.add_argument("--variant", required=True,
                        help="preset name, or a variant name from --config")
    replay.add_argument("--config")
    replay.add_argument("--out")
    replay.set_defaults(func=cmd_replay)

    validate = sub.add_parser("validate", help="check a config without running it")
    validate.add_argument("--config", required=True)
    validate.set_defaults(func=cmd_validate)

    plot = sub.add_parser("plot", help="render figures from a results directory")
    plot.add_argument("--results", required=True)
    plot.add_argument("--out")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
