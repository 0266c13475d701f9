"""
Unit tests for exposure moments, empirical Bayes scores and the surrogate likelihood
"""
import pytest
import sys
from pathlib import Path

import numpy as np
from scipy.stats import multivariate_normal

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from latentee.engines.exposure import obs_loglik_x, score_theta3
from latentee.engines.model.params import ExposureMatrices, transform_forward, transform_inverse
from latentee.engines.moments import (
    ExposureModel, eb_scores, latent_marginal_moments, outcome_conditional_moments,
    subject_moments, surrogate_marginal_moments,
)
from latentee.errors import Singular
from tests.builders import one_latent_params, simulated, two_latent_params


def joint_gaussian(spec, theta3, w):
    """Mean and covariance of (U, X) from the structural form, by direct matrix algebra"""
    mats = ExposureMatrices.from_theta3(spec, theta3)
    l, p = spec.l, spec.p
    a_inv = np.linalg.inv(np.eye(l) - mats.gamma1)
    T = np.block([[a_inv, np.zeros((l, p))], [mats.lam @ a_inv, np.eye(p)]])
    sigma = np.block([[mats.psi, np.zeros((l, p))], [np.zeros((p, l)), mats.omega_delta]])
    shock_mean = np.concatenate([mats.alpha + mats.gamma2 @ w, mats.nu + mats.K @ w])
    return T @ shock_mean, T @ sigma @ T.T


class TestExposureMoments:
    """Test marginal and conditional exposure moments"""

    def setup_method(self):
        """Setup test environment"""
        self.params = two_latent_params()
        self.spec = self.params.spec
        self.theta3 = self.params.theta3
        self.w = np.array([0.7])

    def test_marginal_moments(self):
        """Latent and surrogate moments match the structural form"""
        mean, cov = joint_gaussian(self.spec, self.theta3, self.w)
        mu_u, psi_u = latent_marginal_moments(self.spec, self.theta3, self.w)
        mu_x, omega_x = surrogate_marginal_moments(self.spec, self.theta3, self.w)
        np.testing.assert_allclose(mu_u, mean[:2], atol=1e-12)
        np.testing.assert_allclose(psi_u, cov[:2, :2], atol=1e-12)
        np.testing.assert_allclose(mu_x, mean[2:], atol=1e-12)
        np.testing.assert_allclose(omega_x, cov[2:, 2:], atol=1e-12)

    @pytest.mark.parametrize("mask", [
        [True, True, True, True, True],
        [True, False, True, False, True],
        [False, False, False, True, True],
    ])
    def test_eb_scores_match_conditioning(self, mask):
        """EB score and covariance equal Gaussian conditioning on the observed surrogates"""
        mask = np.array(mask)
        x = np.array([0.3, 1.1, -0.4, 0.9, 0.2])
        mean, cov = joint_gaussian(self.spec, self.theta3, self.w)
        obs = 2 + np.flatnonzero(mask)
        gain = cov[:2, obs] @ np.linalg.inv(cov[np.ix_(obs, obs)])
        expected_u = mean[:2] + gain @ (x[mask] - mean[obs])
        expected_psi = cov[:2, :2] - gain @ cov[obs, :2]

        u_tilde, psi_tilde = eb_scores(self.spec, self.theta3, np.where(mask, x, np.nan), mask, self.w)
        np.testing.assert_allclose(u_tilde, expected_u, atol=1e-10)
        np.testing.assert_allclose(psi_tilde, expected_psi, atol=1e-10)

    def random_theta3(self, rng: np.random.Generator) -> np.ndarray:
        """Exposure parameters scattered around the reference values"""
        groups = self.spec.layout.theta3_groups()
        u = transform_forward(np.asarray(self.theta3), groups)
        return transform_inverse(u + 0.4 * rng.normal(size=u.size), groups)

    def test_eb_oracle_random_models(self):
        """EB moments equal direct Gaussian conditioning over random models, masks and data"""
        rng = np.random.default_rng(2024)
        p = self.spec.p
        for _ in range(1000):
            theta3 = self.random_theta3(rng)
            w = rng.normal(size=1)
            mask = rng.random(p) < 0.6
            x = rng.normal(size=p)
            mean, cov = joint_gaussian(self.spec, theta3, w)
            obs = 2 + np.flatnonzero(mask)
            if obs.size:
                gain = cov[:2, obs] @ np.linalg.inv(cov[np.ix_(obs, obs)])
                expected_u = mean[:2] + gain @ (x[mask] - mean[obs])
                expected_psi = cov[:2, :2] - gain @ cov[obs, :2]
            else:
                expected_u, expected_psi = mean[:2], cov[:2, :2]
            u_tilde, psi_tilde = eb_scores(self.spec, theta3, np.where(mask, x, np.nan), mask, w)
            np.testing.assert_allclose(u_tilde, expected_u, atol=1e-8)
            np.testing.assert_allclose(psi_tilde, expected_psi, atol=1e-8)

    def test_psi_tilde_shrinks_with_more_surrogates(self):
        """Observing one more surrogate never increases the conditional covariance"""
        rng = np.random.default_rng(2025)
        p = self.spec.p
        for _ in range(500):
            model = ExposureModel(self.spec, self.random_theta3(rng))
            mask = rng.random(p) < 0.5
            missing = np.flatnonzero(~mask)
            if not missing.size:
                continue
            larger = mask.copy()
            larger[rng.choice(missing)] = True
            gap = model.pattern(mask).psi_tilde - model.pattern(larger).psi_tilde
            assert np.linalg.eigvalsh(gap).min() > -1e-10

    def test_no_surrogates_observed(self):
        """With nothing observed the EB score is the prior mean"""
        mask = np.zeros(5, dtype=bool)
        u_tilde, psi_tilde = eb_scores(self.spec, self.theta3, np.full(5, np.nan), mask, self.w)
        mu_u, psi_u = latent_marginal_moments(self.spec, self.theta3, self.w)
        np.testing.assert_allclose(u_tilde, mu_u)
        np.testing.assert_allclose(psi_tilde, psi_u)

    def test_pattern_cache(self):
        """Pattern moments are memoized and equal a fresh computation"""
        model = ExposureModel(self.spec, self.theta3)
        mask = np.array([True, False, True, True, False])
        first = model.pattern(mask)
        assert model.pattern(mask.copy()) is first
        fresh = ExposureModel(self.spec, self.theta3).pattern(mask)
        np.testing.assert_array_equal(first.psi_tilde, fresh.psi_tilde)

    def test_singular_resolvent(self):
        """gamma1 making I - gamma1 singular raises Singular"""
        spec = self.spec
        fields = {f: getattr(spec, f) for f in spec.__dataclass_fields__}
        fields["gamma1_pattern"] = [[0.0, 0.5], [np.nan, 0.0]]
        cyclic = type(spec)(**fields)
        theta3 = np.array(self.theta3)
        theta3[cyclic.layout.theta3_names.index("gamma1[u2,u1]")] = 2.0
        with pytest.raises(Singular):
            ExposureModel(cyclic, theta3)

    def test_singular_pattern(self):
        """A pattern whose surrogate covariance is singular raises Singular"""
        params = one_latent_params()
        theta3 = np.array(params.theta3)
        names = params.spec.layout.theta3_names
        theta3[names.index("omega_delta.var[x1]")] = 1e-30
        theta3[names.index("omega_delta.var[x2]")] = 1e-30
        model = ExposureModel(params.spec, theta3)
        with pytest.raises(Singular):
            model.pattern(np.array([True, True, False]))


class TestOutcomeMoments:
    """Test outcome conditional moments"""

    def test_conditional_moments(self):
        """Mean uses the EB score; covariance adds beta' psi_tilde beta to every entry"""
        params = one_latent_params()
        spec = params.spec
        z = np.array([[0.0], [1.0], [2.0]])
        u_tilde, psi_tilde = np.array([0.4]), np.array([[0.25]])
        mu, cov = outcome_conditional_moments(spec, params.theta1, params.theta2, u_tilde, psi_tilde, z, 3)
        np.testing.assert_allclose(mu, 2.0 - 0.7 * 0.4 + 0.3 * z[:, 0])
        inflation = 0.49 * 0.25
        np.testing.assert_allclose(cov, np.eye(3) * 1.0 + 0.5 + inflation)

    def test_subject_moments(self):
        """MomentSet for one subject is consistent with its parts"""
        params = one_latent_params()
        dataset = simulated(params, n=5)
        subject = dataset.subjects[0]
        moments = subject_moments(params, subject)
        assert moments.mu_y_given_x.shape == (subject.n_i,)
        assert moments.omega_y_given_x.shape == (subject.n_i, subject.n_i)
        u_tilde, _ = eb_scores(params.spec, params.theta3, subject.x, subject.mask, subject.w)
        np.testing.assert_allclose(moments.u_tilde, u_tilde)


class TestSurrogateLikelihood:
    """Test the observed-data surrogate likelihood and its score"""

    def setup_method(self):
        """Setup test environment"""
        self.params = two_latent_params()
        self.spec = self.params.spec
        self.dataset = simulated(self.params, n=40, seed=11)

    def test_loglik_matches_density(self):
        """Per-subject log-likelihood equals the Gaussian density of the observed surrogates"""
        per_subject = obs_loglik_x(self.spec, self.params.theta3, self.dataset, per_subject=True)
        for i, s in enumerate(self.dataset.subjects):
            mean, cov = joint_gaussian(self.spec, self.params.theta3, s.w)
            obs = np.flatnonzero(s.mask)
            expected = multivariate_normal(mean[2 + obs], cov[np.ix_(2 + obs, 2 + obs)]).logpdf(s.x[obs])
            assert per_subject[i] == pytest.approx(expected, abs=1e-9)
        total = obs_loglik_x(self.spec, self.params.theta3, self.dataset)
        assert total == pytest.approx(per_subject.sum())

    def test_analytic_score_matches_numeric(self):
        """Analytic theta3 score agrees with differences of the log-likelihood"""
        analytic = score_theta3(self.spec, self.params.theta3, self.dataset, gradient="analytic")
        theta3 = np.array(self.params.theta3)
        numeric = np.zeros_like(theta3)
        for k in range(theta3.size):
            h = 1e-6 * max(1.0, abs(theta3[k]))
            up, down = theta3.copy(), theta3.copy()
            up[k] += h
            down[k] -= h
            numeric[k] = (obs_loglik_x(self.spec, up, self.dataset)
                          - obs_loglik_x(self.spec, down, self.dataset)) / (2 * h)
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-5

    def test_per_subject_score_sums(self):
        """Per-subject scores sum to the total score"""
        per = score_theta3(self.spec, self.params.theta3, self.dataset, per_subject=True, gradient="analytic")
        total = score_theta3(self.spec, self.params.theta3, self.dataset, gradient="analytic")
        assert per.shape == (self.dataset.N, self.spec.layout.k3)
        np.testing.assert_allclose(per.sum(axis=0), total)

    def test_eb_derivatives_match_numeric(self):
        """Derivatives of the EB scores agree with differences"""
        theta3 = np.array(self.params.theta3)
        state = ExposureModel(self.spec, theta3).bind(self.dataset)
        d_u, d_psi = state.eb_derivatives
        for k in (0, 3, 8, 12, 17):
            h = 1e-6
            up, down = theta3.copy(), theta3.copy()
            up[k] += h
            down[k] -= h
            s_up = ExposureModel(self.spec, up).bind(self.dataset)
            s_down = ExposureModel(self.spec, down).bind(self.dataset)
            np.testing.assert_allclose(d_u[k], (s_up.u_tilde - s_down.u_tilde) / (2 * h), atol=1e-6)
            np.testing.assert_allclose(d_psi[k], (s_up.psi_tilde - s_down.psi_tilde) / (2 * h), atol=1e-6)
