import numpy as np
import pytest

from mspmb import gaussian


@pytest.fixture(autouse=True)
def _invariant_checks():
    """Run every test with covariance and existence checks switched on."""
    previous = gaussian.CHECK_INVARIANTS
    gaussian.set_invariant_checks(True)
    yield
    gaussian.set_invariant_checks(previous)


def random_spd(rng, dim, scale=1.0, floor=0.1):
    a = rng.normal(size=(dim, dim))
    return scale * (a @ a.T / dim + floor * np.eye(dim))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def kf_degeneration_case(n_steps, seed=0):
    """Single feature seen from a perfectly known vehicle with no clutter, no
    births and p_D = 1, so the filter should collapse to a plain Kalman filter.

    Process noise is off so the vehicle stays exactly known after prediction.
    Returns ``(models, cfg, state0, steps)``.
    """
    from mspmb.filter import FilterConfig, Models
    from mspmb.gaussian import GaussianDensity, GaussianMixture
    from mspmb.models import BirthSurvivalModel, CvModel, GnssModel, V2fModel, cv_matrices, intensity
    from mspmb.rfs import BernoulliComponent, PmbState, PoissonIntensity, VehicleBelief
    from mspmb.scan import ScanRecord

    cv = CvModel(0.5, 0.0)
    A, _ = cv_matrices(cv)
    models = Models(cv, V2fModel(0.42, 1.0, 0.0),
                    BirthSurvivalModel(intensity(0.0), GaussianMixture.empty(4), 1.0),
                    {1: GnssModel(1.0)})
    gen = np.random.default_rng(seed)
    feature = np.array([10.0, -5.0, 0.5, 0.2])
    vehicle = np.array([0.0, 0.0, 1.0, 0.0])
    steps = []
    for t in range(n_steps):
        if t:
            feature, vehicle = A @ feature, A @ vehicle
        z = vehicle[:2] - feature[:2] + np.sqrt(0.42) * gen.standard_normal(2)
        steps.append([ScanRecord(t, 1, None, z[None, :])])
    prior = GaussianDensity(np.array([9.0, -4.0, 0.0, 0.0]), np.diag([4.0, 4.0, 1.0, 1.0]))
    state0 = PmbState(0, PoissonIntensity(GaussianMixture.empty(4)),
                      [BernoulliComponent(0, 1.0, prior)],
                      {1: VehicleBelief(1, GaussianDensity(np.array([0.0, 0.0, 1.0, 0.0]),
                                                           np.zeros((4, 4))))})
    return models, FilterConfig(), state0, steps


def reference_kf(models, state0, steps):
    """Plain Kalman filter on the feature, treating the vehicle as known."""
    from mspmb.gaussian import kf_predict, kf_update
    from mspmb.models import cv_matrices

    A, W = cv_matrices(models.cv)
    v2f = models.v2f
    feature = state0.detected[0].pdf
    vehicle = state0.vehicles[1].state.mean
    out = []
    for t, (scan,) in enumerate(steps):
        if t:
            feature = kf_predict(feature, A, W)
            vehicle = A @ vehicle
        feature, _ = kf_update(feature, scan.v2f[0] - v2f.H1 @ vehicle, v2f.H2, v2f.Q)
        out.append(feature)
    return out
