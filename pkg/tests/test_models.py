import numpy as np
import pytest

from mspmb.errors import ContractError
from mspmb.gaussian import GaussianDensity
from mspmb.models import (BirthSurvivalModel, CvModel, GnssModel, V2fModel,
                          clutter_log_intensity, clutter_log_intensity_batch, cv_matrices,
                          intensity, v2f_effective_likelihood)

from conftest import random_spd


def test_cv_transition_row():
    A, _ = cv_matrices(CvModel(dt=0.5))
    np.testing.assert_array_equal(A[0], [1, 0, 0.5, 0])


def test_cv_zero_noise():
    _, W = cv_matrices(CvModel(dt=0.5, accel_psd=0.0))
    np.testing.assert_array_equal(W, np.zeros((4, 4)))


def test_cv_noise_entries():
    _, W = cv_matrices(CvModel(dt=0.5, accel_psd=0.05))
    # 0.05 * 0.5 and 0.05 * 0.5**2 / 2
    assert W[3][3] == pytest.approx(0.025, abs=1e-15)
    assert W[1][3] == pytest.approx(0.00625, abs=1e-15)
    assert W[0][0] == pytest.approx(0.05 * 0.125 / 3, abs=1e-15)
    np.testing.assert_array_equal(W, W.T)
    assert np.linalg.eigvalsh(W).min() >= 0


def test_cv_small_dt_limit():
    A, W = cv_matrices(CvModel(dt=1e-9, accel_psd=0.05))
    np.testing.assert_allclose(A, np.eye(4), atol=1e-8)
    np.testing.assert_allclose(W, 0.0, atol=1e-8)


def test_cv_matrices_are_read_only():
    A, _ = cv_matrices(CvModel())
    with pytest.raises(ValueError):
        A[0, 0] = 2.0


@pytest.mark.parametrize("kwargs", [{"dt": 0}, {"accel_psd": -1}])
def test_cv_model_validation(kwargs):
    with pytest.raises(ContractError):
        CvModel(**kwargs)


def test_model_validation():
    with pytest.raises(ContractError):
        GnssModel(0.0)
    with pytest.raises(ContractError):
        V2fModel(p_detect=1.3)
    with pytest.raises(ContractError):
        V2fModel(clutter_rate=-1)
    with pytest.raises(ContractError):
        V2fModel(clutter_half_width=0)
    with pytest.raises(ContractError):
        BirthSurvivalModel(p_survival=0)


def test_birth_defaults():
    bs = BirthSurvivalModel()
    assert bs.birth.total_weight() == pytest.approx(0.05)
    assert bs.initial_unknown.total_weight() == pytest.approx(10.0)
    np.testing.assert_array_equal(bs.birth.covs[0], np.diag([1e4, 1e4, 1, 1]))
    assert len(intensity(0.0)) == 1 and intensity(0.0).total_weight() == 0.0


def test_effective_likelihood_at_mean():
    zero = np.zeros((4, 4))
    out = v2f_effective_likelihood([-3, -4], GaussianDensity(np.zeros(4), zero),
                                   GaussianDensity([3, 4, 0, 0], zero),
                                   V2fModel(sigma2=1.0, p_detect=1.0))
    assert out == pytest.approx(-np.log(2 * np.pi), abs=1e-12)


def test_effective_likelihood_detection_shift(rng):
    s = GaussianDensity(rng.normal(size=4), random_spd(rng, 4))
    x = GaussianDensity(rng.normal(size=4), random_spd(rng, 4))
    z = rng.normal(size=2)
    a = v2f_effective_likelihood(z, s, x, V2fModel(p_detect=1.0))
    b = v2f_effective_likelihood(z, s, x, V2fModel(p_detect=0.9))
    assert b - a == pytest.approx(np.log(0.9), abs=1e-12)


def _gauss_hermite_2d(mean, cov, n):
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    weights = weights / weights.sum()
    L = np.linalg.cholesky(cov)
    g1, g2 = np.meshgrid(nodes, nodes, indexing="ij")
    pts = mean + np.stack([g1.ravel(), g2.ravel()], axis=1) @ L.T
    w = np.outer(weights, weights).ravel()
    return pts, w


def test_effective_likelihood_matches_quadrature():
    """Integrate the conditional likelihood over sensor and feature positions."""
    rng = np.random.default_rng(5)
    model = V2fModel(sigma2=1.5, p_detect=0.9)
    for _ in range(5):
        s = GaussianDensity(rng.normal(size=4), random_spd(rng, 4, scale=0.5))
        x = GaussianDensity(rng.normal(size=4), random_spd(rng, 4, scale=0.5))
        z = s.mean[:2] - x.mean[:2] + rng.normal(scale=0.7, size=2)
        ps, ws = _gauss_hermite_2d(s.mean[:2], s.cov[:2, :2], 40)
        px, wx = _gauss_hermite_2d(x.mean[:2], x.cov[:2, :2], 40)
        diff = z[None, None, :] - (ps[:, None, :] - px[None, :, :])
        q = model.sigma2
        lik = np.exp(-0.5 * np.sum(diff**2, axis=-1) / q) / (2 * np.pi * q)
        integral = model.p_detect * np.einsum("i,j,ij->", ws, wx, lik)
        got = np.exp(v2f_effective_likelihood(z, s, x, model))
        assert got == pytest.approx(integral, rel=1e-4)


def test_effective_likelihood_integrates_to_detection_probability():
    rng = np.random.default_rng(11)
    model = V2fModel(sigma2=0.42, p_detect=0.9)
    for _ in range(3):
        s = GaussianDensity(rng.normal(size=4), random_spd(rng, 4, scale=0.3))
        x = GaussianDensity(rng.normal(size=4), random_spd(rng, 4, scale=0.3))
        center = s.mean[:2] - x.mean[:2]
        g = np.linspace(-12, 12, 481)
        X, Y = np.meshgrid(center[0] + g, center[1] + g, indexing="ij")
        vals = np.array([np.exp(v2f_effective_likelihood([a, b], s, x, model))
                         for a, b in zip(X.ravel(), Y.ravel())]).reshape(X.shape)
        total = np.trapezoid(np.trapezoid(vals, g, axis=1), g)
        assert total == pytest.approx(0.9, abs=1e-3)


def test_clutter_intensity():
    model = V2fModel(clutter_rate=10, clutter_half_width=500)
    assert clutter_log_intensity([10, -20], model) == pytest.approx(np.log(1e-5))
    assert clutter_log_intensity([501, 0], model) == -np.inf
    assert clutter_log_intensity([0, 0], V2fModel(clutter_rate=0)) == -np.inf
    batch = clutter_log_intensity_batch(np.array([[0, 0], [600, 0]]), model)
    np.testing.assert_allclose(batch, [np.log(1e-5), -np.inf])
