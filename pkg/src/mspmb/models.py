"""Linear-Gaussian system models: constant-velocity dynamics, GNSS and
vehicle-to-feature (V2F) measurements, clutter, survival and birth.

State ordering is ``[px, py, vx, vy]`` everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ContractError
from .gaussian import LOG_2PI, GaussianDensity, GaussianMixture, log_normal_pdf, symmetrize

STATE_DIM = 4
MEAS_DIM = 2

# position selector: [1 0] (x) I2
H_G = np.kron(np.array([[1.0, 0.0]]), np.eye(2))


@dataclass(frozen=True)
class CvModel:
    dt: float = 0.5
    accel_psd: float = 0.05

    def __post_init__(self):
        if not self.dt > 0:
            raise ContractError("CvModel.dt must be positive")
        if self.accel_psd < 0:
            raise ContractError("CvModel.accel_psd must be non-negative")


@lru_cache(maxsize=64)
def _cv_matrices(dt: float, q: float):
    A = np.kron(np.array([[1.0, dt], [0.0, 1.0]]), np.eye(2))
    W = q * np.kron(np.array([[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]]), np.eye(2))
    A.setflags(write=False)
    W.setflags(write=False)
    return A, W


def cv_matrices(model: CvModel) -> tuple[np.ndarray, np.ndarray]:
    """Transition matrix and process-noise covariance of the CV model."""
    return _cv_matrices(float(model.dt), float(model.accel_psd))


@dataclass(frozen=True)
class GnssModel:
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ContractError("GnssModel.sigma2 must be positive")

    @property
    def H(self) -> np.ndarray:
        return H_G

    @property
    def R(self) -> np.ndarray:
        return self.sigma2 * np.eye(MEAS_DIM)


@dataclass(frozen=True)
class V2fModel:
    """Relative measurement ``z = H1 s + H2 x + q`` with ``q ~ N(0, sigma2 I)``."""

    sigma2: float = 0.42
    p_detect: float = 0.9
    clutter_rate: float = 10.0
    clutter_half_width: float = 500.0

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ContractError("V2fModel.sigma2 must be non-negative")
        if not 0 < self.p_detect <= 1:
            raise ContractError("V2fModel.p_detect must lie in (0, 1]")
        if self.clutter_rate < 0:
            raise ContractError("V2fModel.clutter_rate must be non-negative")
        if not self.clutter_half_width > 0:
            raise ContractError("V2fModel.clutter_half_width must be positive")

    @property
    def H1(self) -> np.ndarray:
        return H_G

    @property
    def H2(self) -> np.ndarray:
        return -H_G

    @property
    def Q(self) -> np.ndarray:
        return self.sigma2 * np.eye(MEAS_DIM)

    @property
    def log_clutter_density(self) -> float:
        """log of lambda_c(z) inside the clutter square."""
        if self.clutter_rate == 0:
            return -np.inf
        return float(np.log(self.clutter_rate) - 2.0 * np.log(2.0 * self.clutter_half_width))

    def p_detect_at(self, sensor_state=None, feature_state=None) -> float:
        # state-dependent detection is not modelled; kept as the single hook
        return self.p_detect


def _default_unknown_cov() -> np.ndarray:
    return np.diag([100.0**2, 100.0**2, 1.0, 1.0])


def intensity(weight: float, mean=None, cov=None) -> GaussianMixture:
    """Single-component intensity ``weight * N(mean, cov)``."""
    mean = np.zeros(STATE_DIM) if mean is None else np.asarray(mean, dtype=float)
    cov = _default_unknown_cov() if cov is None else np.asarray(cov, dtype=float)
    if weight < 0:
        raise ContractError("intensity weight must be non-negative")
    lw = np.log(weight) if weight > 0 else -np.inf
    return GaussianMixture([lw], mean[None, :], cov[None, :, :])


@dataclass(frozen=True)
class BirthSurvivalModel:
    birth: GaussianMixture = field(default_factory=lambda: intensity(0.05))
    initial_unknown: GaussianMixture = field(default_factory=lambda: intensity(10.0))
    p_survival: float = 0.7

    def __post_init__(self):
        if not 0 < self.p_survival <= 1:
            raise ContractError("p_survival must lie in (0, 1]")
        for name in ("birth", "initial_unknown"):
            mix = getattr(self, name)
            if np.any(~np.isfinite(np.exp(mix.log_weights))):
                raise ContractError(f"{name} intensity has non-finite weights")


def v2f_innovation_cov(vehicle: GaussianDensity, feature: GaussianDensity,
                       model: V2fModel) -> np.ndarray:
    """H1 P_s H1' + H2 P_x H2' + Q."""
    H1, H2 = model.H1, model.H2
    return symmetrize(H1 @ vehicle.cov @ H1.T + H2 @ feature.cov @ H2.T + model.Q)


def v2f_effective_likelihood(z, vehicle: GaussianDensity, feature: GaussianDensity,
                             model: V2fModel) -> float:
    """log of p_D * N(z; H1 m_s + H2 m_x, H1 P_s H1' + H2 P_x H2' + Q).

    This is the detection likelihood with both the vehicle and the feature
    state integrated out.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size != MEAS_DIM or vehicle.dim != STATE_DIM or feature.dim != STATE_DIM:
        raise ContractError("dimension mismatch in V2F likelihood")
    mean = model.H1 @ vehicle.mean + model.H2 @ feature.mean
    S = v2f_innovation_cov(vehicle, feature, model)
    return float(np.log(model.p_detect) + log_normal_pdf(z, mean, S))


def clutter_log_intensity(z, model: V2fModel) -> float:
    z = np.asarray(z, dtype=float).reshape(-1)
    if np.any(np.abs(z) > model.clutter_half_width):
        return -np.inf
    return model.log_clutter_density


def clutter_log_intensity_batch(Z: np.ndarray, model: V2fModel) -> np.ndarray:
    Z = np.asarray(Z, dtype=float).reshape(-1, MEAS_DIM)
    inside = np.all(np.abs(Z) <= model.clutter_half_width, axis=1)
    return np.where(inside, model.log_clutter_density, -np.inf)


def batch_log_normal(innov: np.ndarray, S: np.ndarray):
    """log N for innovations ``innov`` (..., k, d) against covariances S (..., d, d).

    Returns ``(log_pdf, mahalanobis)`` with the broadcast leading shape.
    """
    S_inv = np.linalg.inv(S)
    _, logdet = np.linalg.slogdet(S)
    maha = np.einsum("...ki,...ij,...kj->...k", innov, S_inv, innov)
    d = innov.shape[-1]
    return -0.5 * (maha + logdet[..., None] + d * LOG_2PI), maha


__all__ = [
    "STATE_DIM",
    "MEAS_DIM",
    "H_G",
    "CvModel",
    "GnssModel",
    "V2fModel",
    "BirthSurvivalModel",
    "cv_matrices",
    "intensity",
    "v2f_effective_likelihood",
    "v2f_innovation_cov",
    "clutter_log_intensity",
    "clutter_log_intensity_batch",
    "batch_log_normal",
]
