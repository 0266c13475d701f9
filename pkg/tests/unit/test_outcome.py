"""
Unit tests for the outcome estimating equations
"""
import logging

import pytest
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from latentee.config import settings
from latentee.engines.model.data import Dataset, SubjectData
from latentee.engines.model.spec import CovKind, CovStructure
from latentee.engines.moments import ExposureModel
from latentee.engines.outcome import (
    OutcomeSystem, Scheme, SchemeKind, fit_outcome_ee, initial_theta2, pinned_slots, solve_theta1, solve_theta2,
    working_cov,
)
from latentee.errors import BadParam, RankDeficient
from tests.builders import one_latent_params, one_latent_spec, simulated, two_latent_params


class TestScheme:
    """Test weighting schemes"""

    def test_labels(self):
        """Labels name the scheme and beta*"""
        assert Scheme.ee1().label == "ee1"
        assert Scheme.rc().label == "rc"
        assert Scheme.ee2([0.5, -1.0]).label == "ee2(0.5,-1)"

    def test_weight_beta(self):
        """EE1 uses the current beta, RC zero, EE2 beta*"""
        beta = np.array([0.7])
        np.testing.assert_array_equal(Scheme.ee1().weight_beta(beta), beta)
        np.testing.assert_array_equal(Scheme.rc().weight_beta(beta), [0.0])
        np.testing.assert_array_equal(Scheme.ee2([2.0]).weight_beta(beta), [2.0])

    def test_ee2_requires_beta_star(self):
        """EE2 without beta* or with the wrong length is rejected"""
        with pytest.raises(BadParam):
            Scheme(SchemeKind.EE2)
        with pytest.raises(BadParam):
            Scheme.ee2([1.0, 2.0]).weight_beta(np.array([0.3]))


class TestWorkingCovariance:
    """Test the working covariance"""

    def setup_method(self):
        """Setup test environment"""
        self.spec = one_latent_spec()
        self.psi_tilde = np.array([[0.3]])

    def test_rc_is_outcome_covariance(self):
        """RC weights with the outcome covariance alone"""
        R = working_cov(self.spec, Scheme.rc(), [1.0, 0.5], np.array([2.0]), self.psi_tilde, 3)
        np.testing.assert_allclose(R, np.eye(3) + 0.5)

    def test_ee2_inflation(self):
        """EE2 adds beta*^2 psi_tilde to every entry"""
        R = working_cov(self.spec, Scheme.ee2([2.0]), [1.0, 0.5], np.array([-5.0]), self.psi_tilde, 2)
        np.testing.assert_allclose(R, np.eye(2) + 0.5 + 4.0 * 0.3)

    def test_initial_theta2_admissible(self):
        """Starting values are admissible for every outcome structure"""
        for structure in (CovStructure(CovKind.INDEPENDENCE), CovStructure(CovKind.CS),
                          CovStructure(CovKind.AR1), CovStructure(CovKind.CSH, dim=3),
                          CovStructure(CovKind.HAR1, dim=3), CovStructure(CovKind.UNSTRUCTURED, dim=3),
                          CovStructure(CovKind.DIAGONAL, dim=3)):
            assert initial_theta2(structure, 2.0).shape == (structure.n_params,)


class TestOutcomeEE:
    """Test solving the outcome equations"""

    def setup_method(self):
        """Setup test environment"""
        self.params = one_latent_params()
        self.spec = self.params.spec
        self.dataset = simulated(self.params, n=300, seed=21)

    def test_rc_equals_ee2_at_zero(self):
        """RC and EE2 with beta* = 0 give the same solution"""
        rc = fit_outcome_ee(self.spec, self.dataset, self.params.theta3, Scheme.rc())
        ee2 = fit_outcome_ee(self.spec, self.dataset, self.params.theta3, Scheme.ee2([0.0]))
        np.testing.assert_allclose(rc.theta1_hat, ee2.theta1_hat, atol=1e-10)
        np.testing.assert_allclose(rc.theta2_hat, ee2.theta2_hat, atol=1e-10)

    @pytest.mark.parametrize("scheme", [Scheme.ee1(), Scheme.rc(), Scheme.ee2([-0.5])])
    def test_solution_solves_equations(self, scheme):
        """At the solution the stacked estimating function vanishes"""
        fit = fit_outcome_ee(self.spec, self.dataset, self.params.theta3, scheme)
        assert fit.converged
        assert fit.ee_norm < settings.ee_tol
        system = OutcomeSystem(self.spec, ExposureModel(self.spec, self.params.theta3).bind(self.dataset), scheme)
        assert system.stacked_norm(fit.theta1_hat, fit.theta2_hat) < 1e-6
        assert set(fit.weight_inflation) == {g.pattern.label for g in self.dataset.outcome_groups}

    def test_gls_step_is_fixed_point(self):
        """At the RC solution one more GLS and theta2 step changes nothing"""
        fit = fit_outcome_ee(self.spec, self.dataset, self.params.theta3, Scheme.rc())
        system = OutcomeSystem(self.spec, ExposureModel(self.spec, self.params.theta3).bind(self.dataset), Scheme.rc())
        beta = fit.theta1_hat[1:2]
        theta1 = solve_theta1(system, fit.theta2_hat, beta)
        np.testing.assert_allclose(theta1, fit.theta1_hat, atol=1e-7)
        theta2 = solve_theta2(system, theta1, beta, fit.theta2_hat)
        np.testing.assert_allclose(theta2, fit.theta2_hat, atol=1e-7)

    def test_ee1_near_truth(self):
        """EE1 recovers the outcome parameters with a large sample"""
        dataset = simulated(self.params, n=1500, seed=22, missing=False)
        fit = fit_outcome_ee(self.spec, dataset, self.params.theta3, Scheme.ee1())
        np.testing.assert_allclose(fit.theta1_hat, self.params.theta1, atol=0.2)
        np.testing.assert_allclose(fit.theta2_hat, self.params.theta2, atol=0.25)

    def test_ar1_outcome_structure(self):
        """Fisher scoring handles a nonlinear structure"""
        params = two_latent_params()
        dataset = simulated(params, n=300, seed=23)
        fit = fit_outcome_ee(params.spec, dataset, params.theta3, Scheme.ee1())
        assert fit.converged
        assert -1 < fit.theta2_hat[1] < 1

    def test_negative_shared_variance_pinned(self, caplog):
        """A negative compound-symmetry shared variance is projected to zero"""
        truth = one_latent_params(one_latent_spec(CovStructure(CovKind.AR1)), theta2=(2.0, -0.6))
        dataset = simulated(truth, n=400, seed=24, missing=False, ragged=False)
        spec = truth.spec.with_outcome_cov(CovStructure(CovKind.CS))
        with caplog.at_level(logging.WARNING):
            fit = fit_outcome_ee(spec, dataset.with_spec(spec), truth.theta3, Scheme.rc())
        assert fit.theta2_hat[1] == 0.0
        assert pinned_slots(spec.outcome_cov, fit.theta2_hat).tolist() == [False, True]
        assert "boundary" in caplog.text

    def test_rank_deficient_design(self):
        """A constant occasion covariate is collinear with the intercept"""
        subjects = [SubjectData(id=s.id, x=s.x, mask=s.mask, w=s.w, z=np.ones_like(s.z), y=s.y)
                    for s in self.dataset.subjects]
        with pytest.raises(RankDeficient):
            fit_outcome_ee(self.spec, Dataset(self.spec, subjects), self.params.theta3, Scheme.rc())

    def test_no_outcomes(self):
        """Without outcome rows there is nothing to solve"""
        subjects = [SubjectData(id=s.id, x=s.x, mask=s.mask, w=s.w, z=np.zeros((0, 1)), y=[])
                    for s in self.dataset.subjects]
        with pytest.raises(BadParam):
            fit_outcome_ee(self.spec, Dataset(self.spec, subjects), self.params.theta3, Scheme.rc())
