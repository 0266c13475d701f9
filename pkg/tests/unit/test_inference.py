"""
Unit tests for sandwich variance estimation and Wald reporting
"""
import pytest
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from latentee.engines.inference import (
    EstimatingSystem, Z_975, estimate_A, estimate_B, free_slots, sandwich_parts, sandwich_var,
    wald_report,
)
from latentee.engines.fit import fit_model
from latentee.engines.io.report import build_fit_result
from latentee.engines.model.params import ParamVector
from latentee.engines.model.spec import CovKind, CovStructure
from latentee.engines.outcome import Scheme, fit_outcome_ee
from latentee.errors import Singular
from tests.builders import one_latent_params, one_latent_spec, simulated


class TestSandwich:
    """Test the sandwich covariance"""

    def setup_method(self):
        """Setup test environment"""
        self.params = one_latent_params()
        self.spec = self.params.spec
        self.dataset = simulated(self.params, n=250, seed=41)
        fit = fit_outcome_ee(self.spec, self.dataset, self.params.theta3, Scheme.ee1())
        self.theta = ParamVector(self.spec, fit.theta1_hat, fit.theta2_hat, self.params.theta3)

    def test_decomposition(self):
        """naive + correction + cross reproduces the outcome block"""
        parts = sandwich_parts(self.spec, self.dataset, self.theta, Scheme.ee1())
        result = sandwich_var(parts)
        assert result.decomposition_error < 1e-8
        k = self.spec.layout.k1 + self.spec.layout.k2
        np.testing.assert_allclose(result.naive + result.correction + result.cross, result.full[:k, :k],
                                   atol=1e-10 * np.max(np.abs(result.full)))
        terms = result.theta1_terms()
        assert set(terms) == {"naive", "correction", "cross"}
        assert result.theta1.shape == (self.spec.layout.k1, self.spec.layout.k1)

    def test_full_covariance_positive(self):
        """Full sandwich is symmetric with positive variances"""
        result = sandwich_var(sandwich_parts(self.spec, self.dataset, self.theta, Scheme.ee1()))
        np.testing.assert_allclose(result.full, result.full.T)
        assert np.all(np.diag(result.full) > 0)
        assert np.all(np.linalg.eigvalsh(result.correction[:3, :3]) > -1e-12)

    def test_exposure_rows_ignore_outcome_parameters(self):
        """The theta3 score does not depend on theta1 or theta2"""
        parts = sandwich_parts(self.spec, self.dataset, self.theta, Scheme.ee1())
        k12 = self.spec.layout.k1 + self.spec.layout.k2
        np.testing.assert_array_equal(parts.B[k12:, :k12], 0.0)
        assert parts.block("B13").shape == (k12, self.spec.layout.k3)

    def test_contributions_shape(self):
        """Stacked contributions have one row per subject"""
        system = EstimatingSystem(self.spec, self.dataset, Scheme.rc())
        S = system.contributions(self.theta)
        assert S.shape == (self.dataset.N, self.spec.layout.size)

    def test_meat_and_bread(self):
        """A is a symmetric PSD outer product; B matches the assembled parts"""
        system = EstimatingSystem(self.spec, self.dataset, Scheme.ee1())
        A = estimate_A(system, self.theta)
        k = self.spec.layout.size
        assert A.shape == (k, k)
        np.testing.assert_allclose(A, A.T)
        assert np.min(np.linalg.eigvalsh(A)) > -1e-10 * np.max(np.abs(A))
        B = estimate_B(system, self.theta)
        parts = sandwich_parts(self.spec, self.dataset, self.theta, Scheme.ee1())
        np.testing.assert_allclose(B, parts.B)

    def test_singular_jacobian(self):
        """A singular B is reported"""
        parts = sandwich_parts(self.spec, self.dataset, self.theta, Scheme.ee1())
        parts.B[:, 0] = 0.0
        with pytest.raises(Singular):
            sandwich_var(parts)


class TestPinnedSharedVariance:
    """Sandwich inference when the shared variance is pinned at zero"""

    def setup_method(self):
        """Setup test environment"""
        truth = one_latent_params(one_latent_spec(CovStructure(CovKind.AR1)), theta2=(2.0, -0.6))
        self.truth = truth
        self.spec = truth.spec.with_outcome_cov(CovStructure(CovKind.CS))
        self.dataset = simulated(truth, n=400, seed=24, missing=False, ragged=False).with_spec(self.spec)

    def test_pinned_slot_held_fixed(self):
        """A and B drop the pinned slot; the sandwich reports NaN for it"""
        fit = fit_outcome_ee(self.spec, self.dataset, self.truth.theta3, Scheme.rc())
        theta = ParamVector(self.spec, fit.theta1_hat, fit.theta2_hat, self.truth.theta3)
        free = free_slots(self.spec, theta)
        slot = self.spec.layout.slice2.start + 1
        assert not free[slot]
        assert free.sum() == self.spec.layout.size - 1
        parts = sandwich_parts(self.spec, self.dataset, theta, Scheme.rc())
        assert parts.A.shape == parts.B.shape == (free.sum(), free.sum())
        result = sandwich_var(parts)
        assert result.full.shape == (self.spec.layout.size,) * 2
        assert np.all(np.isnan(result.full[slot]))
        assert np.all(np.diag(np.delete(np.delete(result.full, slot, 0), slot, 1)) > 0)
        assert result.decomposition_error < 1e-8
        assert np.all(np.isfinite(result.theta1))

    @pytest.mark.parametrize("method", ["rc", "ee1"])
    def test_fit_model_reports(self, method):
        """A boundary fit finishes with a null s.e. for the pinned slot"""
        fit = fit_model(self.spec, self.dataset, method)
        assert fit.params.theta2[1] == 0.0
        result = build_fit_result(fit)
        pinned = result.parameter(self.spec.layout.theta2_names[1])
        assert pinned.estimate == 0.0
        assert pinned.se is None
        beta = result.parameter("beta[u]")
        assert beta.se is not None and beta.se > 0
        assert result.variance_terms is not None


class TestWald:
    """Test Wald statistics"""

    def test_two_and_one_sided(self):
        """Two-sided and one-sided p-values and the 95% interval"""
        report = wald_report(["beta"], np.array([-0.9941]), np.array([[0.5598 ** 2]]))
        row = report.row("beta")
        assert row.z == pytest.approx(-1.7758, abs=1e-4)
        assert row.p_two_sided == pytest.approx(0.0757, abs=1e-4)
        assert row.p_one_sided == pytest.approx(0.0379, abs=1e-4)
        assert row.ci_low == pytest.approx(-0.9941 - Z_975 * 0.5598)
        assert row.ci_high == pytest.approx(-0.9941 + Z_975 * 0.5598)

    def test_no_covariance(self):
        """Without a covariance only the estimate is reported"""
        report = wald_report(["a", "b"], np.array([1.0, 2.0]), None)
        assert report.row("b").estimate == 2.0
        assert report.row("b").se is None
        assert len(report.as_records()) == 2

    def test_critical_value(self):
        """Intervals use the 97.5% normal quantile"""
        assert Z_975 == pytest.approx(1.959964, abs=1e-6)
