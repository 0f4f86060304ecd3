"""Evaluation: OSPA, position-error CDFs and the two Kalman-filter baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import ContractError
from .gaussian import GaussianDensity, kf_predict, kf_update, symmetrize
from .models import H_G, CvModel, GnssModel, V2fModel, cv_matrices
from .scan import CLUTTER, ScanRecord


@dataclass(frozen=True)
class OspaParams:
    cutoff: float = 20.0
    order: float = 2.0

    def __post_init__(self):
        if not self.cutoff > 0:
            raise ContractError("OSPA cutoff must be positive")
        if not self.order >= 1:
            raise ContractError("OSPA order must be >= 1")


def ospa(X, Y, params: OspaParams = OspaParams()) -> float:
    """OSPA distance between two finite sets of points (rows)."""
    X = np.asarray(X, dtype=float).reshape(-1, 2) if np.size(X) else np.zeros((0, 2))
    Y = np.asarray(Y, dtype=float).reshape(-1, 2) if np.size(Y) else np.zeros((0, 2))
    n, m = len(X), len(Y)
    if n == 0 and m == 0:
        return 0.0
    c, p = params.cutoff, params.order
    if n == 0 or m == 0:
        return float(c)
    if n > m:
        X, Y, n, m = Y, X, m, n
    cost = np.minimum(cdist(X, Y), c) ** p
    rows, cols = linear_sum_assignment(cost)
    total = cost[rows, cols].sum() + (c ** p) * (m - n)
    return float(min((total / m) ** (1.0 / p), c))


def position_error(estimate, truth) -> np.ndarray:
    """Euclidean distance between position rows.  Elementwise, so a single row
    and a batch give bit-identical values."""
    d = np.asarray(estimate, dtype=float)[..., :2] - np.asarray(truth, dtype=float)[..., :2]
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1])


@dataclass(frozen=True)
class EmpiricalCdf:
    values: np.ndarray

    def quantile(self, q: float) -> float:
        """Smallest sample x with F(x) >= q."""
        if not 0 <= q <= 1:
            raise ContractError("quantile must lie in [0, 1]")
        n = self.values.size
        idx = max(math.ceil(q * n - 1e-9) - 1, 0)
        return float(self.values[idx])

    def __call__(self, x: float) -> float:
        return float(np.searchsorted(self.values, x, side="right") / self.values.size)

    def table(self, quantiles: Sequence[float]) -> list:
        return [(float(q), self.quantile(q)) for q in quantiles]


def error_cdf(errors) -> EmpiricalCdf:
    values = np.sort(np.asarray(errors, dtype=float).reshape(-1))
    if values.size == 0:
        raise ContractError("error_cdf needs at least one error value")
    if np.any(~np.isfinite(values)):
        raise ContractError("error values must be finite")
    return EmpiricalCdf(values)


def local_kf(scans: Sequence[ScanRecord], prior: GaussianDensity, cv: CvModel,
             gnss: GnssModel) -> list:
    """GNSS-only CV Kalman filter for one vehicle.

    ``scans`` holds that vehicle's scans in time order, one per step; the
    first one is applied to ``prior`` without a prediction.
    """
    A, W = cv_matrices(cv)
    state = prior
    out = []
    for k, scan in enumerate(scans):
        if k:
            state = kf_predict(state, A, W)
        if scan.gnss is not None:
            state, _ = kf_update(state, scan.gnss, gnss.H, gnss.R, name="local KF")
        out.append(state)
    return out


class GenieState:
    """Joint Gaussian over the stacked states of all vehicles and born features.

    Every entity owns a 4-row block; ``slot`` maps ``("v", vehicle_id)`` and
    ``("f", feature_index)`` to block numbers in stacking order.
    """

    def __init__(self, vehicle_priors: Mapping[int, GaussianDensity]):
        vids = list(vehicle_priors)
        self.mean = np.concatenate([vehicle_priors[v].mean for v in vids])
        self.cov = np.zeros((4 * len(vids),) * 2)
        for i, v in enumerate(vids):
            self.cov[4 * i:4 * i + 4, 4 * i:4 * i + 4] = vehicle_priors[v].cov
        self.slot = {("v", v): i for i, v in enumerate(vids)}

    def block(self, key) -> slice:
        i = self.slot[key]
        return slice(4 * i, 4 * i + 4)

    def marginal(self, key) -> GaussianDensity:
        b = self.block(key)
        return GaussianDensity(self.mean[b], self.cov[b, b])

    def cross_cov(self, a, b) -> np.ndarray:
        return self.cov[self.block(a), self.block(b)]

    def predict(self, A, W) -> None:
        n_blocks = self.mean.size // 4
        A_big = np.kron(np.eye(n_blocks), A)
        self.mean = A_big @ self.mean
        self.cov = symmetrize(A_big @ self.cov @ A_big.T + np.kron(np.eye(n_blocks), W))

    def add_feature(self, k: int, prior: GaussianDensity) -> None:
        self.slot[("f", k)] = self.mean.size // 4
        self.mean = np.concatenate([self.mean, prior.mean])
        grown = np.zeros((self.mean.size, self.mean.size))
        grown[:-4, :-4] = self.cov
        grown[-4:, -4:] = prior.cov
        self.cov = grown

    def update(self, scan: ScanRecord, gnss: GnssModel | None, v2f: V2fModel) -> None:
        """Condition on one scan; clutter rows (by origin label) are dropped."""
        vb = self.block(("v", scan.vehicle_id))
        rows, zs, noise = [], [], []
        if scan.gnss is not None:
            H = np.zeros((2, self.mean.size))
            H[:, vb] = H_G
            rows.append(H)
            zs.append(scan.gnss)
            noise.append(gnss.sigma2)
        if scan.n_v2f and len(scan.origins) != scan.n_v2f:
            raise ContractError("genie filter needs origin labels on every V2F row")
        for z, origin in zip(scan.v2f if scan.n_v2f else (), scan.origins):
            if origin == CLUTTER:
                continue
            if ("f", origin) not in self.slot:
                raise ContractError(f"measurement labelled with unborn feature {origin}")
            H = np.zeros((2, self.mean.size))
            H[:, vb] = v2f.H1
            H[:, self.block(("f", origin))] = v2f.H2
            rows.append(H)
            zs.append(z)
            noise.append(v2f.sigma2)
        if rows:
            R = np.diag(np.repeat(noise, 2))
            post, _ = kf_update(GaussianDensity(self.mean, self.cov), np.concatenate(zs),
                                np.vstack(rows), R, name="genie KF")
            self.mean, self.cov = post.mean, post.cov


def genie_central_kf(steps: Sequence[Sequence[ScanRecord]], vehicle_priors: Mapping[int, GaussianDensity],
                     birth_steps: Sequence[int], feature_prior: GaussianDensity, cv: CvModel,
                     gnss: Mapping[int, GnssModel], v2f: V2fModel):
    """Joint Kalman filter over all vehicles and all born features.

    Association comes from the scans' origin labels.  Feature k joins the
    stacked state at ``birth_steps[k]`` with ``feature_prior``.  Returns
    ``(vehicle_tracks, feature_tracks)``: per vehicle id a list of marginal
    Gaussians, and per step a dict from feature index to its marginal mean.
    """
    A, W = cv_matrices(cv)
    joint = GenieState(vehicle_priors)
    vehicle_tracks = {v: [] for v in vehicle_priors}
    feature_tracks = []
    for t, scans in enumerate(steps):
        if t:
            joint.predict(A, W)
        for k, b in enumerate(birth_steps):
            if b == t:
                joint.add_feature(k, feature_prior)
        for scan in scans:
            joint.update(scan, gnss.get(scan.vehicle_id), v2f)
        for v in vehicle_tracks:
            vehicle_tracks[v].append(joint.marginal(("v", v)))
        feature_tracks.append({key[1]: joint.mean[joint.block(key)].copy()
                               for key in joint.slot if key[0] == "f"})
    return vehicle_tracks, feature_tracks
