"""Synthetic world: vehicle and feature trajectories, GNSS and V2F scans.

Every random draw comes from a generator keyed on ``(seed, stream, entity,
step)``.  Noise is drawn as standard normals and scaled afterwards, so two
scenarios that differ only in a variance see the same underlying numbers
(common random numbers across sweep points and variants).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .gaussian import GaussianDensity
from .models import H_G, BirthSurvivalModel, CvModel, GnssModel, V2fModel, cv_matrices, intensity
from .scan import CLUTTER, ScanRecord

_VEHICLE, _FEATURE, _GNSS, _V2F = range(4)


@dataclass(frozen=True)
class VehicleSpec:
    vehicle_id: int
    initial_state: tuple
    gnss_sigma2: float

    def __post_init__(self):
        state = tuple(float(v) for v in self.initial_state)
        if len(state) != 4:
            raise ContractError("vehicle initial_state must have 4 entries")
        object.__setattr__(self, "initial_state", state)
        if self.gnss_sigma2 < 0:
            raise ContractError("gnss_sigma2 must be non-negative")


def default_vehicles(n: int = 1, sigma2=(12.96, 12.96)) -> tuple:
    """Vehicle 1 starts at (0, 200) heading south, vehicle 2 at (0, -200) heading north."""
    states = ((0.0, 200.0, 0.0, -2.0), (0.0, -200.0, 0.0, 2.0))
    return tuple(VehicleSpec(i + 1, states[i], sigma2[i]) for i in range(n))


@dataclass(frozen=True)
class ScenarioSpec:
    duration_steps: int = 351
    dt: float = 0.5
    accel_psd: float = 0.05
    vehicles: tuple = field(default_factory=default_vehicles)
    n_features: int = 5
    birth_interval: int = 20
    anchor_step: int = 175
    feature_init_var: float = 0.25
    v2f_sigma2: float = 0.42
    p_detect: float = 0.9
    clutter_rate: float = 10.0
    clutter_half_width: float = 500.0
    p_survival: float = 0.7
    birth_weight: float = 0.05
    initial_unknown_weight: float = 10.0
    vehicle_prior_var: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        if self.duration_steps < 1:
            raise ContractError("duration_steps must be >= 1")
        if not self.vehicles:
            raise ContractError("at least one vehicle is required")
        ids = [v.vehicle_id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ContractError("vehicle ids must be unique")
        if self.n_features < 0 or self.birth_interval < 0:
            raise ContractError("n_features and birth_interval must be non-negative")
        if self.n_features and (self.n_features - 1) * self.birth_interval >= self.duration_steps:
            raise ContractError("feature birth steps must fall within the duration")
        if not 0 <= self.anchor_step < self.duration_steps:
            raise ContractError("anchor_step must fall within the duration")
        if self.feature_init_var < 0 or self.vehicle_prior_var <= 0:
            raise ContractError("variances must be positive")
        if not 0 <= self.p_detect <= 1:
            raise ContractError("p_detect must lie in [0, 1]")
        if self.v2f_sigma2 < 0 or self.clutter_rate < 0 or not self.clutter_half_width > 0:
            raise ContractError("V2F noise, clutter rate and clutter region must be valid")
        # the remaining fields are validated by the model records
        self.cv_model(), self.birth_survival_model()

    def cv_model(self) -> CvModel:
        return CvModel(self.dt, self.accel_psd)

    def v2f_model(self) -> V2fModel:
        return V2fModel(self.v2f_sigma2, self.p_detect, self.clutter_rate, self.clutter_half_width)

    def gnss_models(self) -> dict:
        return {v.vehicle_id: GnssModel(v.gnss_sigma2) for v in self.vehicles}

    def birth_survival_model(self) -> BirthSurvivalModel:
        return BirthSurvivalModel(intensity(self.birth_weight),
                                  intensity(self.initial_unknown_weight), self.p_survival)

    def vehicle_priors(self) -> dict:
        return {v.vehicle_id: GaussianDensity(np.array(v.initial_state),
                                              self.vehicle_prior_var * np.eye(4))
                for v in self.vehicles}

    def birth_steps(self) -> tuple:
        return tuple(k * self.birth_interval for k in range(self.n_features))

    def with_gnss_sigma2(self, sigma2: float) -> "ScenarioSpec":
        return replace(self, vehicles=tuple(replace(v, gnss_sigma2=sigma2) for v in self.vehicles))


@dataclass(frozen=True)
class GroundTruth:
    """True states.  ``features[k, t]`` is NaN before feature k is born."""

    vehicles: dict
    features: np.ndarray
    birth_steps: tuple

    @property
    def n_steps(self) -> int:
        return self.features.shape[1] if self.features.size else len(
            next(iter(self.vehicles.values())))

    def alive(self, t: int) -> np.ndarray:
        return np.array([b <= t for b in self.birth_steps], dtype=bool)

    def feature_positions(self, t: int) -> np.ndarray:
        if not self.birth_steps:
            return np.zeros((0, 2))
        return self.features[self.alive(t), t, :2]

    def to_dict(self) -> dict:
        return {
            "vehicles": {str(k): v.tolist() for k, v in sorted(self.vehicles.items())},
            "features": np.where(np.isnan(self.features), None, self.features).tolist(),
            "birth_steps": list(self.birth_steps),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        feats = np.array(data["features"], dtype=float)
        if feats.size == 0:
            feats = feats.reshape(0, 0, 4)
        return cls({int(k): np.array(v, dtype=float) for k, v in data["vehicles"].items()},
                   feats, tuple(int(b) for b in data["birth_steps"]))


def _rng(seed: int, stream: int, entity: int, step: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, int(entity), int(step)])


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def generate_trajectories(spec: ScenarioSpec, seed: int) -> GroundTruth:
    """Vehicles run forward from their initial state; each feature is drawn at
    the anchor step and propagated forward to the end and backward to its
    birth step through the time-reversed CV transition."""
    A, W = cv_matrices(spec.cv_model())
    W_sqrt = _psd_sqrt(W)
    A_inv = np.linalg.inv(A)
    T = spec.duration_steps

    vehicles = {}
    for v in spec.vehicles:
        rng = _rng(seed, _VEHICLE, v.vehicle_id)
        noise = rng.standard_normal((T, 4)) @ W_sqrt.T
        states = np.empty((T, 4))
        states[0] = v.initial_state
        for t in range(1, T):
            states[t] = A @ states[t - 1] + noise[t]
        vehicles[v.vehicle_id] = states

    births = spec.birth_steps()
    features = np.full((spec.n_features, T, 4), np.nan)
    anchor = spec.anchor_step
    for k, birth in enumerate(births):
        rng = _rng(seed, _FEATURE, k)
        features[k, anchor] = np.sqrt(spec.feature_init_var) * rng.standard_normal(4)
        noise = rng.standard_normal((T, 4)) @ W_sqrt.T
        for t in range(anchor + 1, T):
            features[k, t] = A @ features[k, t - 1] + noise[t]
        for t in range(anchor - 1, -1, -1):
            features[k, t] = A_inv @ (features[k, t + 1] - noise[t])
        features[k, :birth] = np.nan
    return GroundTruth(vehicles, features, births)


def generate_scans(truth: GroundTruth, spec: ScenarioSpec, seed: int) -> list:
    """All scans, ordered by time step and then by vehicle order in ``spec``."""
    T = truth.n_steps
    q_std = np.sqrt(spec.v2f_sigma2)
    half = spec.clutter_half_width
    scans = []
    for t in range(T):
        alive = np.flatnonzero(truth.alive(t)) if truth.birth_steps else np.zeros(0, int)
        for v in spec.vehicles:
            s = truth.vehicles[v.vehicle_id][t]
            g_rng = _rng(seed, _GNSS, v.vehicle_id, t)
            gnss = H_G @ s + np.sqrt(v.gnss_sigma2) * g_rng.standard_normal(2)

            rng = _rng(seed, _V2F, v.vehicle_id, t)
            detected = rng.random(alive.size) < spec.p_detect
            noise = rng.standard_normal((alive.size, 2))
            ids = alive[detected]
            x = truth.features[ids, t, :2]
            z_true = s[:2] - x
            z_feat = z_true + q_std * noise[detected]
            n_clutter = rng.poisson(spec.clutter_rate)
            z_clutter = rng.uniform(-half, half, (n_clutter, 2))
            Z = np.vstack([z_feat, z_clutter])
            origins = np.concatenate([ids, np.full(n_clutter, CLUTTER)]).astype(int)
            order = rng.permutation(Z.shape[0])
            scans.append(ScanRecord(t, v.vehicle_id, gnss, Z[order], tuple(origins[order])))
    return scans


def scans_by_step(scans) -> list:
    """Group a flat scan list into per-step lists, keeping arrival order."""
    if not scans:
        return []
    n = max(s.time_step for s in scans) + 1
    out = [[] for _ in range(n)]
    for s in scans:
        out[s.time_step].append(s)
    return out
