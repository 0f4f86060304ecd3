import numpy as np
import pytest

from mspmb.association import MarginalAssociation
from mspmb.errors import ContractError
from mspmb.filter import (FilterConfig, Models, predict, reduce_state, sensor_density,
                          step_sequential, update_gnss, update_scan, update_v2f_features,
                          update_v2f_vehicle)
from mspmb.gaussian import GaussianDensity, kf_update
from mspmb.models import (BirthSurvivalModel, CvModel, GnssModel, V2fModel, cv_matrices,
                          intensity, v2f_innovation_cov)
from mspmb.rfs import BernoulliComponent, PmbState, PoissonIntensity, VehicleBelief
from mspmb.scan import ScanRecord

from conftest import kf_degeneration_case, random_spd, reference_kf

V2F = V2fModel()
CFG = FilterConfig()
SU = FilterConfig(name="proposed_su", sensor_update_enabled=True)


def _state(bernoullis=(), ppp_weight=10.0, vehicles=None):
    if vehicles is None:
        vehicles = {1: GaussianDensity(np.array([0.0, 0.0, 1.0, 0.0]), np.eye(4))}
    return PmbState(0, PoissonIntensity(intensity(ppp_weight)), list(bernoullis),
                    {vid: VehicleBelief(vid, g) for vid, g in vehicles.items()})


def _bern(i, r, mean, cov=None):
    return BernoulliComponent(i, r, GaussianDensity(np.asarray(mean, float),
                                                    np.eye(4) if cov is None else cov))


def _models(gnss=None, v2f=V2F, bs=None):
    return Models(CvModel(), v2f, bs or BirthSurvivalModel(),
                  gnss or {1: GnssModel(12.96), 2: GnssModel(12.96)})


# predict -------------------------------------------------------------------

def test_predict_identity_limit():
    state = _state([_bern(0, 0.6, [1, 2, 3, 4])])
    bs = BirthSurvivalModel(intensity(0.0), intensity(10.0), 1.0)
    out = predict(state, CvModel(dt=1e-12, accel_psd=0.0), bs)
    assert out.detected[0].r == 0.6
    np.testing.assert_allclose(out.detected[0].pdf.mean, [1, 2, 3, 4], atol=1e-10)
    np.testing.assert_allclose(out.vehicles[1].state.cov, np.eye(4), atol=1e-10)
    assert out.undetected.total_weight == pytest.approx(10.0, rel=1e-15)
    assert len(out.undetected) == 1


def test_predict_weight_bookkeeping():
    out = predict(_state(ppp_weight=10.0), CvModel(), BirthSurvivalModel())
    assert out.undetected.total_weight == pytest.approx(7.05, rel=1e-12)
    assert out.time_step == 1


def test_predict_existence():
    out = predict(_state([_bern(0, 0.9, np.zeros(4))]), CvModel(), BirthSurvivalModel())
    assert out.detected[0].r == pytest.approx(0.63, abs=1e-15)


def test_predict_moves_means_with_cv():
    A, W = cv_matrices(CvModel())
    out = predict(_state([_bern(0, 0.5, [1, 1, 2, -2])]), CvModel(), BirthSurvivalModel())
    np.testing.assert_allclose(out.detected[0].pdf.mean, A @ [1, 1, 2, -2])
    np.testing.assert_allclose(out.vehicles[1].state.cov, A @ A.T + W)


# GNSS ----------------------------------------------------------------------

def test_gnss_zero_innovation():
    state = _state([_bern(0, 0.5, np.ones(4))])
    out = update_gnss(state, 1, [0.0, 0.0], GnssModel(2.0))
    np.testing.assert_array_equal(out.vehicles[1].state.mean, state.vehicles[1].state.mean)
    assert np.trace(out.vehicles[1].state.cov) < np.trace(state.vehicles[1].state.cov)
    assert out.detected == state.detected
    assert out.undetected is state.undetected


def test_gnss_rtk_accuracy():
    sigma2 = 5.76e-4
    out = update_gnss(_state(), 1, [0.3, -0.2], GnssModel(sigma2))
    std = np.sqrt(np.diag(out.vehicles[1].state.cov)[:2])
    # scalar gain with unit prior variance: posterior variance = s / (1 + s)
    np.testing.assert_allclose(std, np.sqrt(sigma2 / (1 + sigma2)), rtol=1e-12)
    assert np.all(std <= 0.024)


def test_gnss_unknown_vehicle():
    with pytest.raises(KeyError):
        update_gnss(_state(), 7, [0.0, 0.0], GnssModel(1.0))


# V2F feature update ----------------------------------------------------------

def test_empty_scan_misses_everything():
    state = _state([_bern(0, 0.9, np.zeros(4)), _bern(1, 0.3, np.full(4, 5.0))])
    out, marg, _ = update_v2f_features(state, 1, np.zeros((0, 2)), V2F, CFG)
    p = V2F.p_detect
    for before, after in zip(state.detected, out.detected):
        assert after.r == pytest.approx(before.r * (1 - p) / (1 - p * before.r), rel=1e-12)
        assert after.pdf == before.pdf
    assert len(out.detected) == 2
    np.testing.assert_allclose(out.undetected.gm.weights, state.undetected.gm.weights * (1 - p))
    np.testing.assert_array_equal(marg.p_miss, [1.0, 1.0])


def test_miss_weight_of_certain_bernoulli():
    state = _state([_bern(0, 1.0, np.zeros(4))])
    _, _, problem = update_v2f_features(state, 1, [[400.0, 400.0]], V2F, CFG)
    assert np.exp(problem.log_miss[0]) == pytest.approx(0.1, abs=1e-15)


def _clutter_free_e(z, s, ppp_weight, ppp_mean, ppp_cov, model):
    """p_D * w * int N(z; s - x, Q) N(x; m, P) dx over a position grid."""
    centre = s - z
    h = 0.01
    g = np.arange(-8.0, 8.0 + h / 2, h)
    X, Y = np.meshgrid(centre[0] + g, centre[1] + g, indexing="ij")
    q = model.sigma2
    lik = np.exp(-((z[0] - s[0] + X) ** 2 + (z[1] - s[1] + Y) ** 2) / (2 * q)) / (2 * np.pi * q)
    d = np.stack([X - ppp_mean[0], Y - ppp_mean[1]], axis=-1)
    Pinv = np.linalg.inv(ppp_cov)
    prior = np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, Pinv, d)) / (
        2 * np.pi * np.sqrt(np.linalg.det(ppp_cov)))
    integral = np.trapezoid(np.trapezoid(lik * prior, g, axis=1), g)
    return model.p_detect * ppp_weight * integral


def test_far_measurement_spawns_weak_bernoulli():
    s = np.array([20.0, -10.0, 1.0, 0.0])
    vehicle = GaussianDensity(s, np.zeros((4, 4)))
    state = _state([_bern(0, 0.6, [20, -10, 0, 0])], vehicles={1: vehicle})
    z = np.array([-300.0, 250.0])
    out, marg, problem = update_v2f_features(state, 1, z[None], V2F, CFG)

    assert problem.log_detect[0, 0] == -np.inf
    e = _clutter_free_e(z, s[:2], 10.0, np.zeros(2), 1e4 * np.eye(2), V2F)
    lam = 10.0 / 1000.0**2
    new = out.detected[1]
    assert new.r == pytest.approx(e / (lam + e), rel=1e-4)
    assert new.r < 0.01
    p = V2F.p_detect
    assert out.detected[0].r == pytest.approx(0.6 * (1 - p) / (1 - 0.6 * p), rel=1e-12)
    np.testing.assert_allclose(new.pdf.mean[:2], s[:2] - z, atol=1.0)


def test_feature_update_leaves_vehicles_alone():
    state = _state([_bern(0, 0.9, [-3, 1, 0, 0])])
    out, _, _ = update_v2f_features(state, 1, [[3.2, -1.1], [100.0, 40.0]], V2F, CFG)
    assert out.vehicles[1].state == state.vehicles[1].state


def test_gating_blocks_far_pairs():
    state = _state([_bern(0, 0.9, [-3, 1, 0, 0])])
    _, _, problem = update_v2f_features(state, 1, [[3.0, -1.0], [30.0, -1.0]], V2F, CFG)
    assert np.isfinite(problem.log_detect[0, 0])
    assert problem.log_detect[0, 1] == -np.inf


def test_feature_update_unknown_vehicle():
    with pytest.raises(KeyError):
        update_v2f_features(_state(), 3, np.zeros((0, 2)), V2F, CFG)


def test_detection_refines_bernoulli():
    state = _state([_bern(0, 0.9, [-3, 1, 0, 0], 4 * np.eye(4))],
                   vehicles={1: GaussianDensity(np.zeros(4), 0.01 * np.eye(4))})
    out, marg, _ = update_v2f_features(state, 1, [[3.5, -1.5]], V2F, CFG)
    assert marg.p_assoc[0, 0] > 0.99
    assert out.detected[0].r > 0.99
    assert np.trace(out.detected[0].pdf.cov) < np.trace(state.detected[0].pdf.cov)


def test_kf_degeneration_single_update():
    models, cfg, state, steps = kf_degeneration_case(1)
    out, marg, _ = update_v2f_features(state, 1, steps[0][0].v2f, models.v2f, cfg)
    ref = reference_kf(models, state, steps)[0]
    assert len(out.detected) == 1
    assert out.detected[0].r == 1.0
    np.testing.assert_allclose(out.detected[0].pdf.mean, ref.mean, atol=1e-9)
    np.testing.assert_allclose(out.detected[0].pdf.cov, ref.cov, atol=1e-9)
    assert len(out.undetected) == 0


# V2F vehicle update ----------------------------------------------------------

def _marg(p_miss, p_assoc):
    p_assoc = np.atleast_2d(np.asarray(p_assoc, float))
    return MarginalAssociation(np.asarray(p_miss, float), p_assoc, 1 - p_assoc.sum(axis=0))


def test_vehicle_update_needs_a_certain_feature():
    state = _state([_bern(0, 0.7, [-3, 1, 0, 0])])
    out = update_v2f_vehicle(state, 1, [[3.0, -1.0]], _marg([0.1], [[0.9]]), state.detected,
                             V2F, SU)
    assert out.vehicles[1].state == state.vehicles[1].state


def test_vehicle_update_known_feature_is_plain_kf():
    feature = _bern(0, 0.95, [-3, 1, 0, 0], np.zeros((4, 4)))
    state = _state([feature])
    z = np.array([2.4, -1.3])
    out = update_v2f_vehicle(state, 1, z[None], _marg([0.0], [[1.0]]), state.detected, V2F, SU)
    ref, _ = kf_update(state.vehicles[1].state, z - V2F.H2 @ feature.pdf.mean, V2F.H1, V2F.Q)
    np.testing.assert_allclose(out.vehicles[1].state.mean, ref.mean, atol=1e-12)
    np.testing.assert_allclose(out.vehicles[1].state.cov, ref.cov, atol=1e-12)
    prior_var = np.diag(state.vehicles[1].state.cov)[:2]
    np.testing.assert_allclose(np.diag(out.vehicles[1].state.cov)[:2],
                               prior_var * 0.42 / (prior_var + 0.42), rtol=1e-12)


def test_vehicle_update_all_missed():
    state = _state([_bern(0, 0.95, [-3, 1, 0, 0]), _bern(1, 0.99, [5, 5, 0, 0])])
    marg = _marg([1.0, 1.0], np.zeros((2, 1)))
    out = update_v2f_vehicle(state, 1, [[3.0, -1.0]], marg, state.detected, V2F, SU)
    assert out.vehicles[1].state == state.vehicles[1].state


def test_vehicle_update_dimension_check():
    state = _state([_bern(0, 0.95, [-3, 1, 0, 0])])
    with pytest.raises(ContractError, match="marginals"):
        update_v2f_vehicle(state, 1, [[3.0, -1.0], [0.0, 0.0]], _marg([0.5], [[0.5]]),
                           state.detected, V2F, SU)


def test_vehicle_update_disabled_is_identity():
    state = _state([_bern(0, 0.95, [-3, 1, 0, 0])])
    out = update_v2f_vehicle(state, 1, [[3.0, -1.0]], _marg([0.0], [[1.0]]), state.detected,
                             V2F, CFG)
    assert out is state


def test_vehicle_update_uses_pre_update_bernoullis():
    # a Bernoulli born in this scan is not in pre_update_bernoullis, so it
    # cannot pull on the vehicle
    state = _state()
    out, marg, _ = update_v2f_features(state, 1, [[3.0, -1.0]], V2F, SU)
    after = update_v2f_vehicle(out, 1, [[3.0, -1.0]], marg, state.detected, V2F, SU)
    assert after.vehicles[1].state == state.vehicles[1].state


# full step -------------------------------------------------------------------

def test_gnss_only_step_is_predict_plus_gnss():
    state = _state([_bern(0, 0.9, [-3, 1, 0, 0])])
    models = _models()
    scan = ScanRecord(1, 1, [0.7, -0.4], None)
    out = step_sequential(state, [scan], models, CFG)
    ref = update_gnss(predict(state, models.cv, models.birth_survival), 1, scan.gnss,
                      models.gnss[1])
    assert out.vehicles[1].state == ref.vehicles[1].state
    assert out.detected == reduce_state(ref, CFG).detected


def test_empty_step_is_predict_only():
    state = _state([_bern(0, 0.9, [-3, 1, 0, 0])])
    models = _models()
    out = step_sequential(state, [], models, CFG)
    ref = reduce_state(predict(state, models.cv, models.birth_survival), CFG)
    assert out.to_dict() == ref.to_dict()


def test_step_rejects_unknown_vehicle():
    with pytest.raises(ContractError, match="unknown vehicle"):
        step_sequential(_state(), [ScanRecord(1, 9, [0.0, 0.0])], _models(), CFG)


def _shared_feature_step(cfg, order=(1, 2), seed=0, predict_first=True):
    """Vehicle 1 (RTK) and vehicle 2 (SPS) both see one well-known feature."""
    gen = np.random.default_rng(seed)
    feature = np.array([10.0, 5.0, 0.0, 0.0])
    s1 = np.array([0.0, 20.0, 0.0, -2.0])
    s2 = np.array([0.0, -20.0, 0.0, 2.0])
    vehicles = {1: GaussianDensity(s1 + gen.normal(0, 0.02, 4), np.diag([4e-4, 4e-4, 1, 1])),
                2: GaussianDensity(s2 + gen.normal(0, 3, 4), np.diag([13.0, 13.0, 1, 1]))}
    state = _state([_bern(0, 1.0, feature + gen.normal(0, 0.5, 4),
                          np.diag([0.25, 0.25, 0.1, 0.1]))], ppp_weight=1.0, vehicles=vehicles)
    models = _models(gnss={1: GnssModel(5.76e-4), 2: GnssModel(12.96)})
    A, _ = cv_matrices(models.cv)
    scans = {}
    for vid, s, var in ((1, s1, 5.76e-4), (2, s2, 12.96)):
        s_next = A @ s
        gnss = s_next[:2] + np.sqrt(var) * gen.standard_normal(2)
        z = s_next[:2] - (A @ feature)[:2] + np.sqrt(0.42) * gen.standard_normal(2)
        scans[vid] = ScanRecord(1, vid, gnss, z[None])
    return step_sequential(state, [scans[v] for v in order], models, cfg, predict_first)


def test_sensor_update_transfers_information():
    off = _shared_feature_step(CFG)
    on = _shared_feature_step(SU)
    assert np.trace(on.vehicles[2].state.cov[:2, :2]) < np.trace(off.vehicles[2].state.cov[:2, :2])


def test_scan_order_sensitivity_is_bounded():
    # prediction would drop r to p_S = 0.7 < r_certain, letting only the second
    # scan use the feature; skip it so both orders see a certain feature
    within = {1: 0, 2: 0}
    for seed in range(20):
        a = _shared_feature_step(SU, (1, 2), seed, predict_first=False)
        b = _shared_feature_step(SU, (2, 1), seed, predict_first=False)
        for vid in (1, 2):
            diff = np.abs(a.vehicles[vid].state.mean[:2] - b.vehicles[vid].state.mean[:2])
            std = np.sqrt(np.minimum(np.diag(a.vehicles[vid].state.cov)[:2],
                                     np.diag(b.vehicles[vid].state.cov)[:2]))
            within[vid] += bool(np.all(diff < std))
    assert within[1] == 20
    assert within[2] >= 18


def test_first_scan_after_prediction_skips_vehicle_update():
    # after prediction r = 0.7 < r_certain, so when vehicle 2 scans first its
    # belief only sees GNSS
    on = _shared_feature_step(SU, (2, 1), seed=0)
    off = _shared_feature_step(CFG, (2, 1), seed=0)
    assert on.vehicles[2].state == off.vehicles[2].state


def test_update_scan_without_v2f_returns_no_marginals():
    state = _state()
    out, marg = update_scan(state, ScanRecord(0, 1, [0.0, 0.0], None), _models(), CFG)
    assert marg is None
    assert out.detected == state.detected


def test_kf_degeneration_over_steps():
    models, cfg, state, steps = kf_degeneration_case(10, seed=3)
    ref = reference_kf(models, state, steps)
    for t, scans in enumerate(steps):
        state = step_sequential(state, scans, models, cfg, predict_first=t > 0)
        assert len(state.detected) == 1
        np.testing.assert_allclose(state.detected[0].pdf.mean, ref[t].mean, atol=1e-9)
        np.testing.assert_allclose(state.detected[0].pdf.cov, ref[t].cov, atol=1e-9)


# comparison variants ---------------------------------------------------------

def _scan(gnss):
    return ScanRecord(0, 1, gnss, np.zeros((0, 2)))


def test_tombp1_matches_proposed_with_known_vehicle():
    s = np.array([3.0, -2.0, 1.0, 0.5])
    state = _state([_bern(0, 0.8, [-3, 1, 0, 0])],
                   vehicles={1: GaussianDensity(s, np.zeros((4, 4)))})
    Z = [[6.2, -3.1], [90.0, 12.0]]
    t1 = FilterConfig(name="t1", variant="tombp1")
    sensor = sensor_density(state, _scan(s[:2]), t1, GnssModel(1.0))
    a, ma, _ = update_v2f_features(state, 1, Z, V2F, t1, sensor=sensor)
    b, mb, _ = update_v2f_features(state, 1, Z, V2F, CFG)
    np.testing.assert_allclose(ma.p_assoc, mb.p_assoc, atol=1e-12)
    assert len(a.detected) == len(b.detected)
    for x, y in zip(a.detected, b.detected):
        assert x.r == pytest.approx(y.r, abs=1e-12)
        np.testing.assert_allclose(x.pdf.mean, y.pdf.mean, atol=1e-9)


def test_tombp2_adds_gnss_variance():
    rng = np.random.default_rng(1)
    state = _state(vehicles={1: GaussianDensity(np.zeros(4), random_spd(rng, 4))})
    feature = GaussianDensity(np.ones(4), random_spd(rng, 4))
    gnss = GnssModel(2.0736)
    scan = _scan([0.5, 0.5])
    s1 = sensor_density(state, scan, FilterConfig(variant="tombp1"), gnss)
    s2 = sensor_density(state, scan, FilterConfig(variant="tombp2"), gnss)
    np.testing.assert_array_equal(s1.mean[:2], [0.5, 0.5])
    diff = v2f_innovation_cov(s2, feature, V2F) - v2f_innovation_cov(s1, feature, V2F)
    np.testing.assert_allclose(diff, 2.0736 * np.eye(2), atol=1e-12)


def test_proposed_with_gnss_sized_uncertainty_matches_tombp2():
    rng = np.random.default_rng(2)
    gnss = GnssModel(0.9216)
    vcov = np.diag([0.9216, 0.9216, 3.0, 3.0])
    state = _state(vehicles={1: GaussianDensity(np.array([1.0, 2.0, 0.0, 0.0]), vcov)})
    feature = GaussianDensity(np.ones(4), random_spd(rng, 4))
    scan = _scan([1.0, 2.0])
    proposed = sensor_density(state, scan, CFG, gnss)
    tombp2 = sensor_density(state, scan, FilterConfig(variant="tombp2"), gnss)
    np.testing.assert_allclose(v2f_innovation_cov(proposed, feature, V2F),
                               v2f_innovation_cov(tombp2, feature, V2F), atol=1e-12)


def test_sensor_update_only_for_proposed():
    with pytest.raises(ContractError):
        FilterConfig(variant="tombp1", sensor_update_enabled=True)
    with pytest.raises(ContractError):
        FilterConfig(variant="ekf")


# cardinality -----------------------------------------------------------------

def _separated_run(seed, n_steps=20):
    """Four well-separated features, one vehicle, p_D = 1, no clutter."""
    v2f = V2fModel(0.42, 1.0, 0.0)
    models = _models(gnss={1: GnssModel(0.9216)}, v2f=v2f)
    A, W = cv_matrices(models.cv)
    gen = np.random.default_rng(seed)
    feats = np.array([[40.0, 40.0, 0, 0], [-40, 40, 0, 0], [40, -40, 0, 0], [-40, -40, 0, 0]])
    s = np.array([0.0, 0.0, 1.0, 0.0])
    state = _state(vehicles={1: GaussianDensity(s, np.eye(4))})
    sums = []
    for t in range(n_steps):
        if t:
            feats = feats @ A.T + gen.multivariate_normal(np.zeros(4), W, size=4)
            s = A @ s + gen.multivariate_normal(np.zeros(4), W)
        Z = s[:2] - feats[:, :2] + np.sqrt(0.42) * gen.standard_normal((4, 2))
        gnss = s[:2] + np.sqrt(0.9216) * gen.standard_normal(2)
        state = step_sequential(state, [ScanRecord(t, 1, gnss, gen.permutation(Z))], models,
                                CFG, predict_first=t > 0)
        sums.append(sum(b.r for b in state.detected))
    return np.array(sums)


def test_cardinality_settles_on_truth():
    for seed in range(20):
        sums = _separated_run(seed)
        assert np.all(np.abs(sums[10:] - 4.0) < 0.5), (seed, sums)
