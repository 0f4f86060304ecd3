"""Belief containers for the feature set and the vehicles.

A :class:`PmbState` is one Poisson intensity for never-detected features, a
single multi-Bernoulli for detected ones, and a Gaussian per vehicle.  States
are treated as immutable snapshots: every filter stage returns a new one.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import gaussian
from .errors import ContractError
from .gaussian import GaussianDensity, GaussianMixture

_R_TOL = 1e-12


def clamp_probability(r: float) -> float:
    if r < -_R_TOL or r > 1 + _R_TOL or np.isnan(r):
        raise ContractError(f"existence probability {r!r} outside [0, 1]")
    return min(max(float(r), 0.0), 1.0)


@dataclass(frozen=True)
class BernoulliComponent:
    id: int
    r: float
    pdf: GaussianDensity

    def __post_init__(self):
        object.__setattr__(self, "r", clamp_probability(self.r))

    def to_dict(self) -> dict:
        return {"id": int(self.id), "r": self.r, "pdf": self.pdf.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "BernoulliComponent":
        return cls(int(data["id"]), float(data["r"]), GaussianDensity.from_dict(data["pdf"]))


@dataclass(frozen=True)
class PoissonIntensity:
    gm: GaussianMixture

    @property
    def total_weight(self) -> float:
        return self.gm.total_weight()

    def __len__(self):
        return len(self.gm)


@dataclass(frozen=True)
class VehicleBelief:
    vehicle_id: int
    state: GaussianDensity

    @property
    def position(self) -> np.ndarray:
        return self.state.mean[:2]


@dataclass(frozen=True)
class PmbState:
    time_step: int
    undetected: PoissonIntensity
    detected: tuple = ()
    vehicles: Mapping[int, VehicleBelief] = field(default_factory=dict)
    # next Bernoulli label; not part of the serialized record
    next_id: int = 0

    def __post_init__(self):
        detected = tuple(self.detected)
        object.__setattr__(self, "detected", detected)
        ids = [b.id for b in detected]
        if len(set(ids)) != len(ids):
            raise ContractError("Bernoulli ids must be unique")
        if ids and self.next_id <= max(ids):
            object.__setattr__(self, "next_id", max(ids) + 1)
        if gaussian.CHECK_INVARIANTS:
            self.check()

    def check(self) -> None:
        """Assert the closure invariants (r in [0, 1], PSD covariances)."""
        for b in self.detected:
            if not 0.0 <= b.r <= 1.0:
                raise ContractError(f"Bernoulli {b.id} has r={b.r}")
            gaussian.check_covariance(b.pdf.cov, f"Bernoulli {b.id} cov")
        for vid, v in self.vehicles.items():
            gaussian.check_covariance(v.state.cov, f"vehicle {vid} cov")
        w = self.undetected.gm.weights
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ContractError("undetected intensity weights must be finite and >= 0")

    def vehicle(self, vehicle_id: int) -> VehicleBelief:
        try:
            return self.vehicles[vehicle_id]
        except KeyError:
            raise KeyError(f"unknown vehicle id {vehicle_id!r}") from None

    def with_vehicle(self, vehicle_id: int, state: GaussianDensity) -> "PmbState":
        vehicles = dict(self.vehicles)
        vehicles[vehicle_id] = VehicleBelief(vehicle_id, state)
        return replace(self, vehicles=vehicles)

    def to_dict(self) -> dict:
        return {
            "time_step": int(self.time_step),
            "undetected": self.undetected.gm.to_dict(),
            "detected": [b.to_dict() for b in self.detected],
            "vehicles": {
                str(vid): v.state.to_dict() for vid, v in sorted(self.vehicles.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PmbState":
        detected = [BernoulliComponent.from_dict(b) for b in data["detected"]]
        vehicles = {
            int(k): VehicleBelief(int(k), GaussianDensity.from_dict(v))
            for k, v in data["vehicles"].items()
        }
        return cls(
            time_step=int(data["time_step"]),
            undetected=PoissonIntensity(GaussianMixture.from_dict(data["undetected"])),
            detected=detected,
            vehicles=vehicles,
        )


@dataclass(frozen=True)
class AssociationProblem:
    """Log single-hypothesis weights for one scan.

    ``log_miss[i]``: Bernoulli i undetected; ``log_detect[i, k]``: Bernoulli i
    generated measurement k; ``log_new[k]``: measurement k is clutter or a
    newly detected feature.
    """

    log_miss: np.ndarray
    log_detect: np.ndarray
    log_new: np.ndarray

    def __post_init__(self):
        lm = np.asarray(self.log_miss, dtype=float).reshape(-1)
        ln = np.asarray(self.log_new, dtype=float).reshape(-1)
        ld = np.asarray(self.log_detect, dtype=float).reshape(lm.size, ln.size)
        for name, arr in (("log_miss", lm), ("log_detect", ld), ("log_new", ln)):
            if np.any(np.isnan(arr)) or np.any(arr == np.inf):
                raise ContractError(f"{name} entries must be finite or -inf")
        object.__setattr__(self, "log_miss", lm)
        object.__setattr__(self, "log_detect", ld)
        object.__setattr__(self, "log_new", ln)

    @property
    def n(self) -> int:
        return self.log_miss.size

    @property
    def m(self) -> int:
        return self.log_new.size

    def transposed(self) -> "AssociationProblem":
        """Same problem with the roles of Bernoullis and measurements swapped."""
        return AssociationProblem(self.log_new, self.log_detect.T, self.log_miss)


def estimate_features(state: PmbState, r_threshold: float = 0.5) -> np.ndarray:
    """Means of the Bernoullis whose existence probability exceeds the threshold."""
    if not 0 < r_threshold < 1:
        raise ContractError("r_threshold must lie in (0, 1)")
    means = [b.pdf.mean for b in state.detected if b.r > r_threshold]
    if not means:
        return np.zeros((0, 4))
    return np.stack(means)


def recycle_or_prune(state: PmbState, r_prune: float = 1e-3, recycle: bool = False) -> PmbState:
    """Drop Bernoullis with ``r < r_prune``.

    With ``recycle`` the dropped existence mass re-enters the undetected
    intensity as ``r * N(mean, cov)`` components.
    """
    if not 0 <= r_prune < 1:
        raise ContractError("r_prune must lie in [0, 1)")
    kept, dropped = [], []
    for b in state.detected:
        (kept if b.r >= r_prune else dropped).append(b)
    if not dropped:
        return state
    undetected = state.undetected
    if recycle:
        extra = [(np.log(b.r), b.pdf) for b in dropped if b.r > 0]
        if extra:
            add = GaussianMixture.from_components(extra)
            undetected = PoissonIntensity(undetected.gm.concat(add))
    return replace(state, detected=tuple(kept), undetected=undetected)
