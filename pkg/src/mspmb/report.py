"""CSV tables and replayable scan files.

Table layouts (header row first, one record per line):

* ``ospa.csv``          sweep_parameter, sweep_value, variant, n_runs, mean_ospa_m
* ``ospa_steps.csv``    run_id, seed, sweep_value, variant, t, ospa_m
* ``vehicle_error.csv`` run_id, seed, sweep_value, method, vehicle_id, t, pos_error_m
* ``cdf.csv``           sweep_value, method, vehicle_id, quantile, error_m

``sweep_value`` is empty when no sweep is configured.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .metrics import error_cdf
from .scan import ScanRecord
from .sim import GroundTruth

OSPA_HEADER = ("sweep_parameter", "sweep_value", "variant", "n_runs", "mean_ospa_m")
OSPA_STEPS_HEADER = ("run_id", "seed", "sweep_value", "variant", "t", "ospa_m")
VEHICLE_ERROR_HEADER = ("run_id", "seed", "sweep_value", "method", "vehicle_id", "t",
                        "pos_error_m")
CDF_HEADER = ("sweep_value", "method", "vehicle_id", "quantile", "error_m")
SCAN_FORMAT = "mspmb-scans"
SCAN_FORMAT_VERSION = 1


def fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def ospa_step_rows(record):
    for name, series in record.ospa.items():
        for t, value in enumerate(series):
            yield (record.run_id, record.seed, fmt(record.sweep_value), name, t, fmt(value))


def vehicle_error_rows(record):
    for (method, vid), series in record.vehicle_errors.items():
        for t, value in enumerate(series):
            yield (record.run_id, record.seed, fmt(record.sweep_value), method, vid, t,
                   fmt(value))


def write_tables(result, outdir, quantiles) -> list:
    """Write the four CSV tables for a Monte-Carlo result; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    param = result.sweep_parameter or ""
    n_runs = len(result.seeds)

    ospa_rows = [(param, fmt(v), name, n_runs, fmt(result.mean_ospa(name, v)))
                 for v in result.sweep_values for name in result.variant_names]
    step_rows = [row for rec in result.records for row in ospa_step_rows(rec)]
    err_rows = [row for rec in result.records for row in vehicle_error_rows(rec)]

    cdf_rows = []
    methods = list(result.variant_names) + list(result.baselines)
    vids = sorted({vid for rec in result.records for (_, vid) in rec.vehicle_errors})
    for v in result.sweep_values:
        for method in methods:
            for vid in vids:
                cdf = error_cdf(result.vehicle_errors(method, vid, v))
                cdf_rows.extend((fmt(v), method, vid, fmt(q), fmt(e)) for q, e in cdf.table(quantiles))

    return [
        write_csv(outdir / "ospa.csv", OSPA_HEADER, ospa_rows),
        write_csv(outdir / "ospa_steps.csv", OSPA_STEPS_HEADER, step_rows),
        write_csv(outdir / "vehicle_error.csv", VEHICLE_ERROR_HEADER, err_rows),
        write_csv(outdir / "cdf.csv", CDF_HEADER, cdf_rows),
    ]


def read_table(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# scan files
# ---------------------------------------------------------------------------

class ScanFileError(ValueError):
    pass


def write_scan_file(path, scenario: dict, scans, truth: GroundTruth | None = None, *,
                    run_id: int = 0, seed: int | None = None, sweep_value=None) -> Path:
    payload = {
        "format": SCAN_FORMAT,
        "version": SCAN_FORMAT_VERSION,
        "run_id": run_id,
        "seed": seed,
        "sweep_value": sweep_value,
        "scenario": scenario,
        "truth": None if truth is None else truth.to_dict(),
        "scans": [s.to_dict() for s in scans],
    }
    path = Path(path)
    path.write_text(json.dumps(payload, separators=(",", ":")))
    return path


def read_scan_file(path) -> dict:
    """Parse a scan file; malformed input raises :class:`ScanFileError` with a byte offset."""
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ScanFileError(f"{path}: not UTF-8 at byte {exc.start}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise ScanFileError(f"{path}: malformed JSON at byte {offset} (line {exc.lineno}, "
                            f"column {exc.colno}): {exc.msg}") from exc
    if not isinstance(data, dict) or data.get("format") != SCAN_FORMAT:
        raise ScanFileError(f"{path}: not a {SCAN_FORMAT} file")
    if data.get("version") != SCAN_FORMAT_VERSION:
        raise ScanFileError(f"{path}: unsupported version {data.get('version')!r}")
    try:
        scans = [ScanRecord.from_dict(s) for s in data["scans"]]
        truth = None if data.get("truth") is None else GroundTruth.from_dict(data["truth"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ScanFileError(f"{path}: invalid scan record: {exc}") from exc
    if "scenario" not in data:
        raise ScanFileError(f"{path}: missing scenario")
    steps = [s.time_step for s in scans]
    if steps != sorted(steps) or (steps and steps[0] < 0):
        raise ScanFileError(f"{path}: scans must be ordered by time step")
    data["scans"] = scans
    data["truth"] = truth
    return data

