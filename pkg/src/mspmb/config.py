"""Experiment configuration: JSON loading, validation and hashing.

Validation errors carry the dotted field path and, when the source text is
available, the line on which that field appears.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import ContractError
from .filter import VARIANTS, FilterConfig
from .harness import BASELINES, SWEEP_PARAMETERS, apply_sweep
from .metrics import OspaParams
from .sim import ScenarioSpec, VehicleSpec, default_vehicles


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "", line: int | None = None,
                 source: str | None = None):
        self.message = message
        self.path = path
        self.line = line
        self.source = source
        where = source or "config"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {path + ': ' if path else ''}{message}")


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit_open(v):
    return 0 < v < 1


_CHECKS = {
    "positive": (_positive, "must be > 0"),
    "non_negative": (_non_negative, "must be >= 0"),
    "unit_open": (_unit_open, "must lie in (0, 1)"),
    "unit_left_open": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "unit_right_open": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "at_least_one": (lambda v: v >= 1, "must be >= 1"),
    "any": (lambda v: True, ""),
}

# field -> (type, check)
SCENARIO_FIELDS = {
    "duration_steps": (int, "at_least_one"),
    "dt": (float, "positive"),
    "accel_psd": (float, "non_negative"),
    "n_features": (int, "non_negative"),
    "birth_interval": (int, "non_negative"),
    "anchor_step": (int, "non_negative"),
    "feature_init_var": (float, "non_negative"),
    "v2f_sigma2": (float, "non_negative"),
    "p_detect": (float, "unit_left_open"),
    "clutter_rate": (float, "non_negative"),
    "clutter_half_width": (float, "positive"),
    "p_survival": (float, "unit_left_open"),
    "birth_weight": (float, "non_negative"),
    "initial_unknown_weight": (float, "non_negative"),
    "vehicle_prior_var": (float, "positive"),
}
VEHICLE_FIELDS = {"id": (int, "any"), "initial_state": (list, "any"),
                  "gnss_sigma2": (float, "positive")}
VARIANT_FIELDS = {
    "name": (str, "any"),
    "variant": (str, "any"),
    "sensor_update_enabled": (bool, "any"),
    "r_certain": (float, "unit_open"),
    "gating_threshold": (float, "positive"),
    "r_estimate": (float, "unit_open"),
    "association": (str, "any"),
    "bp_max_iters": (int, "at_least_one"),
    "bp_tol": (float, "positive"),
    "r_prune": (float, "unit_right_open"),
    "recycle": (bool, "any"),
    "ppp_prune_log_weight": (float, "any"),
    "ppp_merge_threshold": (float, "non_negative"),
    "ppp_max_components": (int, "at_least_one"),
}
TOP_FIELDS = {"scenario", "variants", "baselines", "n_runs", "seed", "seeds", "sweep",
              "output_dir", "ospa", "cdf_quantiles"}
DEFAULT_QUANTILES = tuple(round(0.01 * k, 2) for k in range(1, 101))


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioSpec
    variants: tuple
    baselines: tuple
    seeds: tuple
    seed_derived: bool = False
    sweep_parameter: str | None = None
    sweep_values: tuple = ()
    output_dir: str = "results"
    ospa: OspaParams = OspaParams()
    cdf_quantiles: tuple = DEFAULT_QUANTILES

    @property
    def n_runs(self) -> int:
        return len(self.seeds)

    def semantic_dict(self) -> dict:
        """Everything that affects results; the output directory does not."""
        return {
            "scenario": scenario_to_dict(self.scenario),
            "variants": [asdict(v) for v in self.variants],
            "baselines": list(self.baselines),
            "seeds": list(self.seeds),
            "sweep": None if self.sweep_parameter is None else {
                "parameter": self.sweep_parameter, "values": list(self.sweep_values)},
            "ospa": asdict(self.ospa),
            "cdf_quantiles": list(self.cdf_quantiles),
        }

    def config_hash(self) -> str:
        return _digest(self.semantic_dict())


def _digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


def _locate(text: str | None, path: list) -> int | None:
    """Best-effort line number of a dotted path inside the JSON text."""
    if text is None:
        return None
    pos = 0
    found = None
    for key in path:
        if isinstance(key, int):
            continue
        idx = text.find(f'"{key}"', pos)
        if idx < 0:
            break
        pos = idx + 1
        found = idx
    if found is None:
        return None
    return text.count("\n", 0, found) + 1


class _Validator:
    def __init__(self, text: str | None, source: str | None):
        self.text = text
        self.source = source

    def fail(self, path: list, message: str):
        dotted = ".".join(f"[{p}]" if isinstance(p, int) else p for p in path).replace(".[", "[")
        raise ConfigError(message, dotted, _locate(self.text, path), self.source)

    def obj(self, value, path, allowed):
        if not isinstance(value, dict):
            self.fail(path, "must be an object")
        for key in value:
            if key not in allowed:
                self.fail(path + [key], f"unknown field (allowed: {', '.join(sorted(allowed))})")
        return value

    def scalar(self, value, path, kind, check="any"):
        if kind is bool:
            if not isinstance(value, bool):
                self.fail(path, f"must be true or false, got {value!r}")
            return value
        if kind is str:
            if not isinstance(value, str):
                self.fail(path, f"must be a string, got {value!r}")
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"must be a number, got {value!r}")
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                self.fail(path, f"must be an integer, got {value!r}")
            value = int(value)
        else:
            value = float(value)
            if not math.isfinite(value):
                self.fail(path, "must be finite")
        ok, message = _CHECKS[check]
        if not ok(value):
            self.fail(path, f"{message}, got {value!r}")
        return value

    def section(self, data, path, table):
        self.obj(data, path, table)
        return {k: self.scalar(v, path + [k], *table[k]) for k, v in data.items()
                if table[k][0] is not list}


def _parse_scenario(val: _Validator, scen_raw) -> ScenarioSpec:
    scen_kwargs = val.section(scen_raw, ["scenario"], {**SCENARIO_FIELDS, "vehicles": (list, "any")})
    if "vehicles" in scen_raw:
        vlist = scen_raw["vehicles"]
        if not isinstance(vlist, list) or not vlist:
            val.fail(["scenario", "vehicles"], "must be a non-empty list")
        vehicles = []
        for i, v in enumerate(vlist):
            path = ["scenario", "vehicles", i]
            kw = val.section(v, path, VEHICLE_FIELDS)
            for req in VEHICLE_FIELDS:
                if req not in v:
                    val.fail(path + [req], "is required")
            state = v["initial_state"]
            if (not isinstance(state, list) or len(state) != 4
                    or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                               for x in state)):
                val.fail(path + ["initial_state"], "must be a list of 4 numbers")
            vehicles.append(VehicleSpec(kw["id"], tuple(state), kw["gnss_sigma2"]))
        scen_kwargs["vehicles"] = tuple(vehicles)
    else:
        scen_kwargs["vehicles"] = default_vehicles(1)
    try:
        return ScenarioSpec(**scen_kwargs)
    except ContractError as exc:
        val.fail(["scenario"], str(exc))


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    out = asdict(spec)
    out["vehicles"] = [
        {"id": v.vehicle_id, "initial_state": list(v.initial_state),
         "gnss_sigma2": v.gnss_sigma2} for v in spec.vehicles
    ]
    return out


def scenario_from_dict(data, text: str | None = None, source: str | None = None) -> ScenarioSpec:
    return _parse_scenario(_Validator(text, source), data)


def parse_config(data, text: str | None = None, source: str | None = None) -> ExperimentConfig:
    val = _Validator(text, source)
    val.obj(data, [], TOP_FIELDS)

    scenario = _parse_scenario(val, data.get("scenario", {}))

    variants = []
    raw_variants = data.get("variants", [{"variant": "proposed"}])
    if not isinstance(raw_variants, list):
        val.fail(["variants"], "must be a list")
    for i, v in enumerate(raw_variants):
        path = ["variants", i]
        kw = val.section(v, path, VARIANT_FIELDS)
        if kw.get("variant", "proposed") not in VARIANTS:
            val.fail(path + ["variant"], f"must be one of {list(VARIANTS)}, got {kw['variant']!r}")
        if kw.get("association", "auto") not in ("auto", "bp", "exact"):
            val.fail(path + ["association"], "must be 'auto', 'bp' or 'exact'")
        if "name" not in kw:
            kw["name"] = kw.get("variant", "proposed") + (
                "_su" if kw.get("sensor_update_enabled") else "")
        try:
            variants.append(FilterConfig(**kw))
        except ContractError as exc:
            val.fail(path, str(exc))
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        val.fail(["variants"], f"variant names must be unique, got {names}")

    baselines_raw = data.get("baselines", {})
    val.obj(baselines_raw, ["baselines"], set(BASELINES))
    baselines = tuple(b for b in BASELINES
                      if val.scalar(baselines_raw.get(b, False), ["baselines", b], bool))
    if not variants and not baselines:
        val.fail(["variants"], "enable at least one variant or baseline")

    sweep_parameter, sweep_values = None, ()
    if data.get("sweep") is not None:
        sweep = val.obj(data["sweep"], ["sweep"], {"parameter", "values"})
        sweep_parameter = val.scalar(sweep.get("parameter"), ["sweep", "parameter"], str)
        if sweep_parameter not in SWEEP_PARAMETERS:
            val.fail(["sweep", "parameter"], f"must be one of {list(SWEEP_PARAMETERS)}")
        raw = sweep.get("values")
        if not isinstance(raw, list) or not raw:
            val.fail(["sweep", "values"], "must be a non-empty list")
        check = {"gnss_sigma2": "positive", "p_detect": "unit_left_open"}.get(
            sweep_parameter, "non_negative")
        sweep_values = tuple(val.scalar(x, ["sweep", "values", i], float, check)
                             for i, x in enumerate(raw))
        for i, x in enumerate(sweep_values):
            try:
                apply_sweep(scenario, sweep_parameter, x)
            except ContractError as exc:
                val.fail(["sweep", "values", i], str(exc))

    ospa_raw = data.get("ospa", {})
    val.obj(ospa_raw, ["ospa"], {"cutoff", "order"})
    ospa = OspaParams(
        val.scalar(ospa_raw.get("cutoff", 20.0), ["ospa", "cutoff"], float, "positive"),
        val.scalar(ospa_raw.get("order", 2.0), ["ospa", "order"], float, "at_least_one"),
    )

    quantiles = DEFAULT_QUANTILES
    if "cdf_quantiles" in data:
        raw = data["cdf_quantiles"]
        if not isinstance(raw, list) or not raw:
            val.fail(["cdf_quantiles"], "must be a non-empty list")
        quantiles = tuple(val.scalar(q, ["cdf_quantiles", i], float, "unit_left_open")
                          for i, q in enumerate(raw))

    output_dir = val.scalar(data.get("output_dir", "results"), ["output_dir"], str)

    n_runs = None
    if "n_runs" in data:
        n_runs = val.scalar(data["n_runs"], ["n_runs"], int, "at_least_one")
    seed_derived = False
    if "seeds" in data:
        raw = data["seeds"]
        if not isinstance(raw, list) or not raw:
            val.fail(["seeds"], "must be a non-empty list of integers")
        seeds = tuple(val.scalar(s, ["seeds", i], int, "non_negative") for i, s in enumerate(raw))
        if n_runs is not None and n_runs != len(seeds):
            val.fail(["n_runs"], f"is {n_runs} but {len(seeds)} seeds are listed")
    else:
        if "seed" in data:
            base = val.scalar(data["seed"], ["seed"], int, "non_negative")
        else:
            base = derive_seed(scenario, variants, baselines, sweep_parameter, sweep_values)
            seed_derived = True
        seeds = tuple(base + k for k in range(n_runs or 1))

    return ExperimentConfig(scenario, tuple(variants), baselines, seeds, seed_derived,
                            sweep_parameter, sweep_values, output_dir, ospa, quantiles)


def derive_seed(scenario, variants, baselines, sweep_parameter, sweep_values) -> int:
    """Default base seed: a stable function of the rest of the configuration."""
    probe = ExperimentConfig(scenario, tuple(variants), tuple(baselines), (), False,
                             sweep_parameter, tuple(sweep_values))
    return int(_digest(probe.semantic_dict())[:8], 16)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno,
                          source=str(path)) from exc
    return parse_config(data, text, str(path))


def variant_from_name(name: str) -> FilterConfig:
    """Preset filter configurations addressable by name on the command line."""
    presets = {
        "proposed": FilterConfig(name="proposed"),
        "proposed_su": FilterConfig(name="proposed_su", sensor_update_enabled=True),
        "tombp1": FilterConfig(name="tombp1", variant="tombp1"),
        "tombp2": FilterConfig(name="tombp2", variant="tombp2"),
    }
    try:
        return presets[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(presets)}",
                          "variant") from None


__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config", "derive_seed",
           "variant_from_name", "scenario_to_dict", "scenario_from_dict", "DEFAULT_QUANTILES"]
