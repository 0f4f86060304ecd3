"""Multisensor Poisson multi-Bernoulli filter with uncertain sensor states.

One time step is: predict everything, then for each scan in arrival order

1. condition that vehicle on its GNSS fix,
2. update the feature set with the V2F measurements, integrating the vehicle
   state out of every single-target likelihood,
3. optionally condition the vehicle on the features it re-observed,

and finally prune.  Later scans see the feature posterior of earlier ones.

The three comparison filters differ only in which Gaussian stands in for the
vehicle state during the V2F update (see :func:`sensor_density`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .association import MarginalAssociation, associate
from .errors import ContractError, DegeneracyError
from .gaussian import (GaussianDensity, GaussianMixture, gm_prune_merge, kf_predict,
                       kf_update, logsumexp, moment_match, symmetrize)
from .models import (BirthSurvivalModel, CvModel, GnssModel, V2fModel, batch_log_normal,
                     clutter_log_intensity_batch, cv_matrices)
from .rfs import (AssociationProblem, BernoulliComponent, PmbState, PoissonIntensity,
                  VehicleBelief, recycle_or_prune)
from .scan import ScanRecord

log = logging.getLogger(__name__)

VARIANTS = ("proposed", "tombp1", "tombp2")


@dataclass(frozen=True)
class FilterConfig:
    name: str = "proposed"
    variant: str = "proposed"
    sensor_update_enabled: bool = False
    r_certain: float = 0.8
    gating_threshold: float = 13.8
    r_estimate: float = 0.5
    association: str = "auto"
    bp_max_iters: int = 200
    bp_tol: float = 1e-6
    r_prune: float = 1e-3
    recycle: bool = False
    ppp_prune_log_weight: float = float(np.log(1e-5))
    ppp_merge_threshold: float = 4.0
    ppp_max_components: int = 20

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.sensor_update_enabled and self.variant != "proposed":
            raise ContractError("sensor update is only defined for the proposed variant")
        if not 0 < self.r_certain < 1:
            raise ContractError("r_certain must lie in (0, 1)")
        if not self.gating_threshold > 0:
            raise ContractError("gating_threshold must be positive")
        if not 0 < self.r_estimate < 1:
            raise ContractError("r_estimate must lie in (0, 1)")
        if not 0 <= self.r_prune < 1:
            raise ContractError("r_prune must lie in [0, 1)")
        if self.association not in ("auto", "bp", "exact"):
            raise ContractError("association must be 'auto', 'bp' or 'exact'")
        if self.bp_max_iters < 1 or not self.bp_tol > 0:
            raise ContractError("bp settings must be positive")
        if self.ppp_max_components < 1 or not self.ppp_merge_threshold >= 0:
            raise ContractError("PPP reduction settings are invalid")


@dataclass(frozen=True)
class Models:
    cv: CvModel
    v2f: V2fModel
    birth_survival: BirthSurvivalModel
    gnss: Mapping[int, GnssModel]


def initial_state(vehicle_priors: Mapping[int, GaussianDensity],
                  birth_survival: BirthSurvivalModel, time_step: int = 0) -> PmbState:
    vehicles = {vid: VehicleBelief(vid, g) for vid, g in vehicle_priors.items()}
    return PmbState(time_step, PoissonIntensity(birth_survival.initial_unknown), (), vehicles)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def _predict_mixture(gm: GaussianMixture, A, W, log_ps) -> GaussianMixture:
    if len(gm) == 0:
        return gm
    means = gm.means @ A.T
    covs = symmetrize(A @ gm.covs @ A.T + W)
    return GaussianMixture(gm.log_weights + log_ps, means, covs)


def predict(state: PmbState, cv: CvModel, bs: BirthSurvivalModel) -> PmbState:
    A, W = cv_matrices(cv)
    p_s = bs.p_survival
    vehicles = {vid: VehicleBelief(vid, kf_predict(v.state, A, W))
                for vid, v in state.vehicles.items()}
    birth = bs.birth
    live = np.isfinite(birth.log_weights)
    if not live.all():
        birth = GaussianMixture(birth.log_weights[live], birth.means[live], birth.covs[live],
                                dim=birth.dim)
    ppp = _predict_mixture(state.undetected.gm, A, W, np.log(p_s)).concat(birth)
    detected = tuple(
        BernoulliComponent(b.id, b.r * p_s, kf_predict(b.pdf, A, W)) for b in state.detected
    )
    return replace(state, time_step=state.time_step + 1, undetected=PoissonIntensity(ppp),
                   detected=detected, vehicles=vehicles)


# ---------------------------------------------------------------------------
# GNSS
# ---------------------------------------------------------------------------

def update_gnss(state: PmbState, vehicle_id: int, z_gnss, model: GnssModel) -> PmbState:
    belief = state.vehicle(vehicle_id).state
    post, _ = kf_update(belief, z_gnss, model.H, model.R, name=f"vehicle {vehicle_id} GNSS")
    return state.with_vehicle(vehicle_id, post)


# ---------------------------------------------------------------------------
# V2F: feature update
# ---------------------------------------------------------------------------

def sensor_density(state: PmbState, scan: ScanRecord, cfg: FilterConfig,
                   gnss_model: GnssModel | None) -> GaussianDensity:
    """Density of the vehicle state used inside the V2F likelihood.

    ``proposed`` uses the tracked belief.  ``tombp1`` takes the raw GNSS fix as
    the exact position; ``tombp2`` does the same but charges the GNSS variance
    to the position, which adds it to the V2F noise.
    """
    belief = state.vehicle(scan.vehicle_id).state
    if cfg.variant == "proposed":
        return belief
    mean = belief.mean.copy()
    if scan.gnss is not None:
        mean[:2] = scan.gnss
    cov = np.zeros_like(belief.cov)
    if cfg.variant == "tombp2" and gnss_model is not None:
        cov[:2, :2] = gnss_model.sigma2 * np.eye(2)
    return GaussianDensity(mean, cov)


def _batch_kf(means, covs, Z, sensor: GaussianDensity, model: V2fModel, label: str):
    """Condition k Gaussians on every measurement in Z with the s-marginalized model.

    Returns ``(log_lik (k, m), maha (k, m), post_means (k, m, 4), post_covs (k, 4, 4))``.
    """
    H1, H2, Q = model.H1, model.H2, model.Q
    R_eff = Q + H1 @ sensor.cov @ H1.T
    z_offset = H1 @ sensor.mean
    S = symmetrize(H2 @ covs @ H2.T + R_eff)
    try:
        log_lik, maha = batch_log_normal(
            Z[None, :, :] - (z_offset + means @ H2.T)[:, None, :], S)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("singular V2F innovation covariance", label) from exc
    if not np.all(np.isfinite(log_lik)):
        raise DegeneracyError("non-finite V2F likelihood", label)
    innov = Z[None, :, :] - (z_offset + means @ H2.T)[:, None, :]
    K = covs @ H2.T @ np.linalg.inv(S)
    post_means = means[:, None, :] + np.einsum("kij,kmj->kmi", K, innov)
    I_KH = np.eye(means.shape[1]) - K @ H2
    post_covs = symmetrize(I_KH @ covs @ np.swapaxes(I_KH, -1, -2)
                           + K @ R_eff @ np.swapaxes(K, -1, -2))
    return log_lik, maha, post_means, post_covs


def _weighted_collapse(weights, means, covs):
    """Moment match of sum_j weights[j] N(means[j], covs[j]); weights sum > 0."""
    total = weights.sum()
    w = weights / total
    mean = w @ means
    diff = means - mean
    cov = np.einsum("j,jab->ab", w, covs) + np.einsum("j,ja,jb->ab", w, diff, diff)
    return mean, symmetrize(cov)


def build_association(state: PmbState, Z: np.ndarray, sensor: GaussianDensity,
                      model: V2fModel, cfg: FilterConfig):
    """Single-hypothesis weights of one scan plus the per-hypothesis posteriors.

    Returns ``(problem, extras)``; ``extras`` carries the conditioned Bernoulli
    and new-feature densities reused by :func:`update_v2f_features`.
    """
    p_d = model.p_detect
    n, m = len(state.detected), Z.shape[0]

    # existing Bernoullis
    if n:
        r = np.array([b.r for b in state.detected])
        means = np.stack([b.pdf.mean for b in state.detected])
        covs = np.stack([b.pdf.cov for b in state.detected])
        with np.errstate(divide="ignore"):
            log_miss = np.log1p(-p_d * r)
            log_r = np.log(r)
    else:
        r = np.zeros(0)
        means, covs = np.zeros((0, 4)), np.zeros((0, 4, 4))
        log_miss = np.zeros(0)
        log_r = np.zeros(0)
    if n and m:
        log_lik, maha, post_means, post_covs = _batch_kf(means, covs, Z, sensor, model,
                                                         "detected Bernoulli")
        log_detect = np.log(p_d) + log_r[:, None] + log_lik
        log_detect[maha > cfg.gating_threshold] = -np.inf
    else:
        log_detect = np.full((n, m), -np.inf)
        post_means = np.zeros((n, m, 4))
        post_covs = covs.copy()

    # measurements as clutter or newly detected features
    ppp = state.undetected.gm
    log_clutter = clutter_log_intensity_batch(Z, model) if m else np.zeros(0)
    if m and len(ppp):
        live = np.isfinite(ppp.log_weights)
        c_means, c_covs, c_lw = ppp.means[live], ppp.covs[live], ppp.log_weights[live]
    else:
        c_lw = np.zeros(0)
    if m and c_lw.size:
        c_lik, _, c_post_means, c_post_covs = _batch_kf(c_means, c_covs, Z, sensor, model,
                                                        "undetected intensity")
        joint = c_lw[:, None] + c_lik                            # (C, m)
        log_e = np.log(p_d) + logsumexp(joint, axis=0)
        new_means = np.empty((m, 4))
        new_covs = np.empty((m, 4, 4))
        for k in range(m):
            w = np.exp(joint[:, k] - joint[:, k].max())
            new_means[k], new_covs[k] = _weighted_collapse(w, c_post_means[:, k], c_post_covs)
    else:
        log_e = np.full(m, -np.inf)
        new_means = np.zeros((m, 4))
        new_covs = np.zeros((m, 4, 4))
    log_new = np.logaddexp(log_clutter, log_e)

    problem = AssociationProblem(log_miss, log_detect, log_new)
    extras = dict(r=r, means=means, covs=covs, post_means=post_means, post_covs=post_covs,
                  log_e=log_e, new_means=new_means, new_covs=new_covs)
    return problem, extras


def update_v2f_features(state: PmbState, vehicle_id: int, Z, model: V2fModel,
                        cfg: FilterConfig, sensor: GaussianDensity | None = None):
    """Feature-set update with one V2F scan, reduced back to a single PMB.

    Returns ``(posterior_state, marginals, problem)``.  Vehicle beliefs are
    left untouched.
    """
    if sensor is None:
        sensor = state.vehicle(vehicle_id).state
    else:
        state.vehicle(vehicle_id)
    Z = np.asarray(Z, dtype=float).reshape(-1, 2)
    p_d = model.p_detect
    problem, ex = build_association(state, Z, sensor, model, cfg)
    marg = associate(problem, cfg.association, cfg.bp_max_iters, cfg.bp_tol)

    detected = []
    for i, b in enumerate(state.detected):
        r = ex["r"][i]
        r_miss = r * (1.0 - p_d) / (1.0 - p_d * r) if r < 1.0 or p_d < 1.0 else 0.0
        w_miss = marg.p_miss[i] * r_miss
        w_det = marg.p_assoc[i]
        r_post = w_miss + w_det.sum()
        if r_post <= 0.0:
            detected.append(BernoulliComponent(b.id, 0.0, b.pdf))
            continue
        hit = np.flatnonzero(w_det > 0.0)
        if hit.size == 0:
            pdf = b.pdf
        else:
            weights = np.concatenate([[w_miss], w_det[hit]])
            comp_means = np.concatenate([b.pdf.mean[None], ex["post_means"][i, hit]])
            comp_covs = np.concatenate([b.pdf.cov[None],
                                        np.repeat(ex["post_covs"][i][None], hit.size, 0)])
            if w_miss == 0.0:
                weights, comp_means, comp_covs = weights[1:], comp_means[1:], comp_covs[1:]
            mean, cov = _weighted_collapse(weights, comp_means, comp_covs)
            pdf = GaussianDensity(mean, cov)
        detected.append(BernoulliComponent(b.id, min(r_post, 1.0), pdf))

    next_id = state.next_id
    for k in range(Z.shape[0]):
        if not np.isfinite(ex["log_e"][k]) or marg.p_new[k] <= 0.0:
            continue
        r_new = marg.p_new[k] * np.exp(ex["log_e"][k] - problem.log_new[k])
        detected.append(BernoulliComponent(
            next_id, min(r_new, 1.0), GaussianDensity(ex["new_means"][k], ex["new_covs"][k])))
        next_id += 1

    with np.errstate(divide="ignore"):
        log_miss_ppp = np.log1p(-p_d)
    ppp = state.undetected.gm.scaled(log_miss_ppp)
    out = replace(state, undetected=PoissonIntensity(ppp), detected=tuple(detected),
                  next_id=next_id)
    return out, marg, problem


# ---------------------------------------------------------------------------
# V2F: vehicle update
# ---------------------------------------------------------------------------

def update_v2f_vehicle(state: PmbState, vehicle_id: int, Z, marginals: MarginalAssociation,
                       pre_update_bernoullis: Sequence[BernoulliComponent], model: V2fModel,
                       cfg: FilterConfig) -> PmbState:
    """Condition one vehicle on the V2F scan through previously certain features.

    Each Bernoulli that was already confident before this scan (``r >
    r_certain``) contributes a mixture: the prior weighted by its miss
    probability plus one Kalman update per measurement weighted by the
    association marginal.  Features are folded in one after another, each
    mixture collapsed to a single Gaussian.
    """
    if not cfg.sensor_update_enabled:
        return state
    Z = np.asarray(Z, dtype=float).reshape(-1, 2)
    pre = list(pre_update_bernoullis)
    if marginals.n != len(pre) or marginals.m != Z.shape[0]:
        raise ContractError(
            f"marginals are {marginals.n}x{marginals.m} but scan has {len(pre)} prior "
            f"Bernoullis and {Z.shape[0]} measurements"
        )
    belief = state.vehicle(vehicle_id).state
    H1, H2, Q = model.H1, model.H2, model.Q
    for i, b in enumerate(pre):
        if b.r <= cfg.r_certain:
            continue
        hits = np.flatnonzero(marginals.p_assoc[i] > 0.0)
        if hits.size == 0:
            continue
        R = symmetrize(Q + H2 @ b.pdf.cov @ H2.T)
        offset = H2 @ b.pdf.mean
        weights = [marginals.p_miss[i]]
        comps = [belief]
        for k in hits:
            post, _ = kf_update(belief, Z[k] - offset, H1, R, name=f"vehicle {vehicle_id}")
            weights.append(marginals.p_assoc[i, k])
            comps.append(post)
        weights = np.asarray(weights)
        keep = weights > 0.0
        lw = np.log(weights[keep])
        mix = GaussianMixture(lw - logsumexp(lw),
                              np.stack([c.mean for c, k in zip(comps, keep) if k]),
                              np.stack([c.cov for c, k in zip(comps, keep) if k]))
        belief = moment_match(mix)
    return state.with_vehicle(vehicle_id, belief)


# ---------------------------------------------------------------------------
# full step
# ---------------------------------------------------------------------------

def reduce_state(state: PmbState, cfg: FilterConfig) -> PmbState:
    state = recycle_or_prune(state, cfg.r_prune, cfg.recycle)
    ppp = gm_prune_merge(state.undetected.gm, cfg.ppp_prune_log_weight,
                         cfg.ppp_merge_threshold, cfg.ppp_max_components)
    return replace(state, undetected=PoissonIntensity(ppp))


def update_scan(state: PmbState, scan: ScanRecord, models: Models, cfg: FilterConfig):
    """GNSS, feature and vehicle update for one scan.

    Returns ``(state, marginals)``.
    """
    gnss_model = models.gnss.get(scan.vehicle_id)
    state.vehicle(scan.vehicle_id)
    if scan.gnss is not None:
        if gnss_model is None:
            raise ContractError(f"no GNSS model for vehicle {scan.vehicle_id}")
        state = update_gnss(state, scan.vehicle_id, scan.gnss, gnss_model)
    if scan.v2f is None:
        return state, None
    sensor = sensor_density(state, scan, cfg, gnss_model)
    pre = state.detected
    state, marg, _ = update_v2f_features(state, scan.vehicle_id, scan.v2f, models.v2f, cfg,
                                         sensor=sensor)
    if cfg.sensor_update_enabled:
        state = update_v2f_vehicle(state, scan.vehicle_id, scan.v2f, marg, pre, models.v2f, cfg)
    return state, marg


def step_sequential(state: PmbState, scans: Sequence[ScanRecord], models: Models,
                    cfg: FilterConfig, predict_first: bool = True) -> PmbState:
    """One time step: predict, then fold in each scan in arrival order."""
    if predict_first:
        state = predict(state, models.cv, models.birth_survival)
    for scan in scans:
        if scan.vehicle_id not in state.vehicles:
            raise ContractError(f"scan from unknown vehicle {scan.vehicle_id}")
        state, _ = update_scan(state, scan, models, cfg)
    return reduce_state(state, cfg)
