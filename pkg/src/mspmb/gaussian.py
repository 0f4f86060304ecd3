"""Dense small-matrix Gaussian algebra.

Everything here works on plain numpy arrays of dimension <= ~10.  Weights of
mixtures are kept in the log domain; intensities are mixtures whose weights do
not sum to one.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError, DegeneracyError

LOG_2PI = float(np.log(2.0 * np.pi))

# Full symmetric/PSD checks cost an eigendecomposition per object, so they only
# run when explicitly enabled (the test-suite turns them on).
CHECK_INVARIANTS = os.environ.get("MSPMB_CHECK_INVARIANTS", "") not in ("", "0")

_MAX_CONDITION = 1e12


def set_invariant_checks(enabled: bool) -> None:
    global CHECK_INVARIANTS
    CHECK_INVARIANTS = bool(enabled)


def logsumexp(a, axis=None):
    """log(sum(exp(a))) along ``axis``; all -inf input gives -inf."""
    a = np.asarray(a, dtype=float)
    peak = np.max(a, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())[()]


def symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


def check_covariance(cov: np.ndarray, name: str = "cov") -> None:
    """Raise ContractError unless ``cov`` is symmetric PSD (within tolerance)."""
    cov = np.asarray(cov, dtype=float)
    scale = max(float(np.max(np.abs(cov))), 1e-300)
    if np.max(np.abs(cov - cov.T)) > 1e-9 * scale:
        raise ContractError(f"{name} is not symmetric")
    eig = np.linalg.eigvalsh(symmetrize(cov))
    if eig.size and eig.min() < -1e-9 * max(float(np.trace(cov)), 1e-300):
        raise ContractError(f"{name} is not positive semidefinite (min eig {eig.min():.3e})")


@dataclass(frozen=True)
class GaussianDensity:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ContractError(
                f"mean has dimension {mean.size} but cov has shape {cov.shape}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if CHECK_INVARIANTS:
            check_covariance(cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_pdf(self, x) -> float:
        return log_normal_pdf(np.asarray(x, dtype=float), self.mean, self.cov)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianDensity":
        return cls(np.array(data["mean"], dtype=float), np.array(data["cov"], dtype=float))

    def __eq__(self, other):
        if not isinstance(other, GaussianDensity):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.cov, other.cov)

    __hash__ = None


def log_normal_pdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    diff = np.asarray(x, dtype=float) - mean
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("covariance is not positive definite") from exc
    sol = np.linalg.solve(chol, diff)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (sol @ sol + logdet + diff.size * LOG_2PI))


def kf_predict(prior: GaussianDensity, trans_matrix, process_noise_cov) -> GaussianDensity:
    A = np.asarray(trans_matrix, dtype=float)
    W = np.asarray(process_noise_cov, dtype=float)
    d = prior.dim
    if A.shape != (d, d) or W.shape != (d, d):
        raise ContractError(
            f"transition {A.shape} / noise {W.shape} do not match state dimension {d}"
        )
    return GaussianDensity(A @ prior.mean, symmetrize(A @ prior.cov @ A.T + W))


def kf_update(prior: GaussianDensity, meas, obs_matrix, meas_noise_cov, name=None):
    """Condition ``prior`` on ``meas = H x + v``, ``v ~ N(0, R)``.

    Returns the posterior (Joseph-form covariance) and ``log N(meas; H m, S)``.
    """
    z = np.asarray(meas, dtype=float).reshape(-1)
    H = np.asarray(obs_matrix, dtype=float)
    R = np.asarray(meas_noise_cov, dtype=float)
    d = prior.dim
    if H.shape != (z.size, d) or R.shape != (z.size, z.size):
        raise ContractError(
            f"observation matrix {H.shape} / noise {R.shape} inconsistent with "
            f"measurement size {z.size} and state dimension {d}"
        )
    P = prior.cov
    S = symmetrize(H @ P @ H.T + R)
    if np.linalg.cond(S) > _MAX_CONDITION:
        raise DegeneracyError("innovation covariance is singular", name)
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("innovation covariance is not positive definite", name) from exc
    innov = z - H @ prior.mean
    PHt = P @ H.T
    # K = P H^T S^-1 via two triangular solves
    K = np.linalg.solve(chol.T, np.linalg.solve(chol, PHt.T)).T
    I_KH = np.eye(d) - K @ H
    cov = symmetrize(I_KH @ P @ I_KH.T + K @ R @ K.T)
    mean = prior.mean + K @ innov
    white = np.linalg.solve(chol, innov)
    loglik = -0.5 * (white @ white + 2.0 * np.sum(np.log(np.diag(chol))) + z.size * LOG_2PI)
    return GaussianDensity(mean, cov), float(loglik)


class GaussianMixture:
    """Gaussian mixture with log-domain weights.

    Stored as stacked arrays (``log_weights`` (k,), ``means`` (k, d),
    ``covs`` (k, d, d)) so that batch operations stay vectorized.  Used both
    as a probability density and as an (unnormalized) intensity.
    """

    __slots__ = ("log_weights", "means", "covs")

    def __init__(self, log_weights, means, covs, dim=None):
        lw = np.asarray(log_weights, dtype=float).reshape(-1)
        k = lw.size
        if k == 0:
            if dim is None:
                dim = np.asarray(means).shape[-1] if np.asarray(means).ndim == 2 else 0
            means = np.zeros((0, dim))
            covs = np.zeros((0, dim, dim))
        else:
            means = np.asarray(means, dtype=float).reshape(k, -1)
        d = means.shape[1]
        covs = np.asarray(covs, dtype=float).reshape(k, d, d)
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise ContractError("mixture log-weights must be finite or -inf")
        self.log_weights = lw
        self.means = means
        self.covs = covs
        if CHECK_INVARIANTS:
            for i in range(k):
                check_covariance(covs[i], f"component {i} cov")

    @classmethod
    def from_components(cls, components: Iterable[tuple[float, GaussianDensity]], dim=None):
        comps = list(components)
        if not comps:
            return cls.empty(dim or 0)
        return cls(
            [lw for lw, _ in comps],
            np.stack([g.mean for _, g in comps]),
            np.stack([g.cov for _, g in comps]),
        )

    @classmethod
    def empty(cls, dim: int) -> "GaussianMixture":
        return cls(np.zeros(0), np.zeros((0, dim)), np.zeros((0, dim, dim)), dim=dim)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __len__(self) -> int:
        return self.log_weights.size

    def __iter__(self) -> Iterator[tuple[float, GaussianDensity]]:
        for i in range(len(self)):
            yield float(self.log_weights[i]), GaussianDensity(self.means[i], self.covs[i])

    @property
    def components(self) -> list[tuple[float, GaussianDensity]]:
        return list(self)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def total_log_weight(self) -> float:
        if len(self) == 0:
            return -np.inf
        return float(logsumexp(self.log_weights))

    def total_weight(self) -> float:
        return float(np.exp(self.total_log_weight()))

    def normalized(self) -> "GaussianMixture":
        return GaussianMixture(self.log_weights - self.total_log_weight(), self.means, self.covs)

    def scaled(self, log_factor: float) -> "GaussianMixture":
        return GaussianMixture(self.log_weights + log_factor, self.means, self.covs)

    def concat(self, other: "GaussianMixture") -> "GaussianMixture":
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        return GaussianMixture(
            np.concatenate([self.log_weights, other.log_weights]),
            np.concatenate([self.means, other.means]),
            np.concatenate([self.covs, other.covs]),
        )

    def to_dict(self) -> dict:
        return {
            "log_weights": [float(w) for w in self.log_weights],
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "dim": self.dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        return cls(
            np.array(data["log_weights"], dtype=float),
            np.array(data["means"], dtype=float),
            np.array(data["covs"], dtype=float),
            dim=data.get("dim"),
        )

    def __repr__(self):
        return f"GaussianMixture(k={len(self)}, dim={self.dim}, total={self.total_weight():.4g})"


def _moments(weights: np.ndarray, means: np.ndarray, covs: np.ndarray):
    """Weighted first/second moments; weights are assumed to sum to one."""
    mean = weights @ means
    diff = means - mean
    cov = np.einsum("k,kij->ij", weights, covs) + np.einsum("k,ki,kj->ij", weights, diff, diff)
    return mean, symmetrize(cov)


def moment_match(mix: GaussianMixture) -> GaussianDensity:
    if len(mix) == 0:
        raise ContractError("cannot moment-match an empty mixture")
    total = logsumexp(mix.log_weights)
    if abs(total) > 1e-9:
        raise ContractError(f"mixture is not normalized (logsumexp = {total:.3e})")
    if len(mix) == 1:
        return GaussianDensity(mix.means[0], mix.covs[0])
    w = np.exp(mix.log_weights - total)
    mean, cov = _moments(w, mix.means, mix.covs)
    return GaussianDensity(mean, cov)


def gm_prune_merge(
    mix: GaussianMixture,
    prune_log_threshold: float = np.log(1e-5),
    merge_mahalanobis_threshold: float = 4.0,
    max_components: int = 20,
) -> GaussianMixture:
    """Bound the size of an intensity mixture.

    Components with log-weight below ``prune_log_threshold`` are dropped.  The
    rest are merged greedily: the heaviest remaining component absorbs every
    component within the squared Mahalanobis gate (measured with the heavy
    component's covariance), replaced by their moment match.  Finally only the
    ``max_components`` heaviest survive.
    """
    keep = mix.log_weights >= prune_log_threshold
    lw = mix.log_weights[keep]
    means = mix.means[keep]
    covs = mix.covs[keep]
    if lw.size == 0:
        return GaussianMixture.empty(mix.dim)

    remaining = list(np.argsort(-lw, kind="stable"))
    out_lw, out_means, out_covs = [], [], []
    while remaining:
        j = remaining[0]
        idx = np.array(remaining)
        diff = means[idx] - means[j]
        try:
            sol = np.linalg.solve(covs[j], diff.T).T
            dist = np.einsum("ki,ki->k", diff, sol)
        except np.linalg.LinAlgError:
            dist = np.where(np.all(diff == 0.0, axis=1), 0.0, np.inf)
        group = idx[dist <= merge_mahalanobis_threshold]
        if j not in group:
            group = np.append(group, j)
        group_total = logsumexp(lw[group])
        if group.size == 1:
            m, P = means[j], covs[j]
        else:
            w = np.exp(lw[group] - group_total)
            m, P = _moments(w, means[group], covs[group])
        out_lw.append(group_total)
        out_means.append(m)
        out_covs.append(P)
        grouped = set(group.tolist())
        remaining = [i for i in remaining if i not in grouped]

    out_lw = np.array(out_lw)
    if out_lw.size > max_components:
        top = np.sort(np.argsort(-out_lw, kind="stable")[:max_components])
        out_lw = out_lw[top]
        out_means = [out_means[i] for i in top]
        out_covs = [out_covs[i] for i in top]
    return GaussianMixture(out_lw, np.stack(out_means), np.stack(out_covs))
