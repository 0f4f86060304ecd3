"""Monte-Carlo driver: simulate, run every filter and baseline on the same
scans, and collect per-step OSPA and vehicle position errors."""
from __future__ import annotations

import logging
import multiprocessing
import os
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError
from .filter import FilterConfig, Models, initial_state, step_sequential
from .gaussian import GaussianDensity
from .metrics import OspaParams, genie_central_kf, local_kf, ospa, position_error
from .rfs import PmbState, estimate_features
from .sim import ScenarioSpec, generate_scans, generate_trajectories, scans_by_step

log = logging.getLogger(__name__)

BASELINES = ("local_kf", "genie_kf")
SWEEP_PARAMETERS = ("gnss_sigma2", "v2f_sigma2", "clutter_rate", "p_detect")
MAX_JOBS_ENV = "MSPMB_MAX_JOBS"


class RunFailure(RuntimeError):
    """A numerical failure inside one Monte-Carlo run."""

    def __init__(self, run_id: int, seed: int, sweep_value, cause: Exception):
        super().__init__(f"run {run_id} (seed {seed}, sweep value {sweep_value}) failed: {cause}")
        self.run_id = run_id
        self.seed = seed
        self.sweep_value = sweep_value
        self.cause = cause


def apply_sweep(spec: ScenarioSpec, parameter: str | None, value) -> ScenarioSpec:
    if parameter is None:
        return spec
    if parameter == "gnss_sigma2":
        return spec.with_gnss_sigma2(float(value))
    if parameter in SWEEP_PARAMETERS:
        return replace(spec, **{parameter: float(value)})
    raise ContractError(f"cannot sweep {parameter!r}; choose from {SWEEP_PARAMETERS}")


def models_for(spec: ScenarioSpec) -> Models:
    return Models(spec.cv_model(), spec.v2f_model(), spec.birth_survival_model(),
                  spec.gnss_models())


def run_filter(steps: Sequence[Sequence], models: Models, cfg: FilterConfig,
               priors: dict) -> Iterator[PmbState]:
    """Yield the posterior after every step.  Step 0 updates the prior directly."""
    state = initial_state(priors, models.birth_survival)
    for t, scans in enumerate(steps):
        state = step_sequential(state, scans, models, cfg, predict_first=t > 0)
        yield state


@dataclass
class RunRecord:
    run_id: int
    seed: int
    sweep_value: float | None
    ospa: dict = field(default_factory=dict)
    vehicle_errors: dict = field(default_factory=dict)


def _position_error(track, truth_states) -> np.ndarray:
    return position_error(np.stack([g.mean[:2] for g in track]), truth_states)


def run_single(spec: ScenarioSpec, variants: Sequence[FilterConfig], baselines: Sequence[str],
               seed: int, run_id: int = 0, sweep_value=None,
               ospa_params: OspaParams = OspaParams()) -> RunRecord:
    truth = generate_trajectories(spec, seed)
    steps = scans_by_step(generate_scans(truth, spec, seed))
    models = models_for(spec)
    priors = spec.vehicle_priors()
    rec = RunRecord(run_id, seed, sweep_value)
    try:
        for cfg in variants:
            ospa_t = np.empty(len(steps))
            tracks = {vid: [] for vid in priors}
            for t, state in enumerate(run_filter(steps, models, cfg, priors)):
                est = estimate_features(state, cfg.r_estimate)[:, :2]
                ospa_t[t] = ospa(est, truth.feature_positions(t), ospa_params)
                for vid in priors:
                    tracks[vid].append(state.vehicles[vid].state)
            rec.ospa[cfg.name] = ospa_t
            for vid, track in tracks.items():
                rec.vehicle_errors[(cfg.name, vid)] = _position_error(track, truth.vehicles[vid])
        if "local_kf" in baselines:
            for vid, prior in priors.items():
                own = [s for step in steps for s in step if s.vehicle_id == vid]
                track = local_kf(own, prior, models.cv, models.gnss[vid])
                rec.vehicle_errors[("local_kf", vid)] = _position_error(track, truth.vehicles[vid])
        if "genie_kf" in baselines:
            birth = models.birth_survival.birth
            feature_prior = GaussianDensity(birth.means[0], birth.covs[0])
            vtracks, _ = genie_central_kf(steps, priors, truth.birth_steps, feature_prior,
                                          models.cv, models.gnss, models.v2f)
            for vid, track in vtracks.items():
                rec.vehicle_errors[("genie_kf", vid)] = _position_error(track, truth.vehicles[vid])
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        raise RunFailure(run_id, seed, sweep_value, exc) from exc
    return rec


@dataclass
class MonteCarloResult:
    sweep_parameter: str | None
    sweep_values: list
    seeds: list
    variant_names: list
    baselines: list
    records: list

    def for_sweep(self, value) -> list:
        return [r for r in self.records if r.sweep_value == value]

    def mean_ospa(self, variant: str, sweep_value=None) -> float:
        runs = [r.ospa[variant] for r in self.for_sweep(sweep_value)]
        return float(np.mean([x.mean() for x in runs]))

    def vehicle_errors(self, method: str, vehicle_id: int, sweep_value=None) -> np.ndarray:
        return np.concatenate([r.vehicle_errors[(method, vehicle_id)]
                               for r in self.for_sweep(sweep_value)])


def _job(args):
    return run_single(*args)


def effective_jobs(requested: int | None) -> int:
    jobs = requested or 1
    cap = os.environ.get(MAX_JOBS_ENV)
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", MAX_JOBS_ENV, cap)
    return max(1, jobs)


def run_monte_carlo(spec: ScenarioSpec, variants: Sequence[FilterConfig], seeds: Sequence[int],
                    baselines: Sequence[str] = (), sweep_parameter: str | None = None,
                    sweep_values: Sequence | None = None, jobs: int | None = 1,
                    ospa_params: OspaParams = OspaParams()) -> MonteCarloResult:
    """Every (sweep point, seed) pair is one independent job; results are
    ordered by sweep point then seed regardless of completion order."""
    if not seeds:
        raise ContractError("at least one seed is required")
    names = [c.name for c in variants]
    if len(set(names)) != len(names):
        raise ContractError("variant names must be unique")
    unknown = set(baselines) - set(BASELINES)
    if unknown:
        raise ContractError(f"unknown baselines {sorted(unknown)}")
    if not variants and not baselines:
        raise ContractError("enable at least one variant or baseline")
    values = list(sweep_values) if sweep_parameter else [None]
    tasks = []
    for value in values:
        point = apply_sweep(spec, sweep_parameter, value)
        for run_id, seed in enumerate(seeds):
            tasks.append((point, tuple(variants), tuple(baselines), int(seed), run_id, value,
                          ospa_params))
    n_jobs = min(effective_jobs(jobs), len(tasks))
    if n_jobs > 1:
        with multiprocessing.get_context("fork").Pool(n_jobs) as pool:
            records = pool.map(_job, tasks, chunksize=1)
    else:
        records = [_job(t) for t in tasks]
    order = {v: i for i, v in enumerate(values)}
    records.sort(key=lambda r: (order[r.sweep_value], r.run_id))
    return MonteCarloResult(sweep_parameter, values, [int(s) for s in seeds], names,
                            list(baselines), records)
