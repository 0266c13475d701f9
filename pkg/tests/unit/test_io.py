"""
Unit tests for model configurations, data ingestion and fit reports
"""
import json

import pytest
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from latentee.engines.fit import ModelFit, fit_model
from latentee.engines.io.config import ModelConfigLoader
from latentee.engines.io.loader import load_data, write_dataset
from latentee.engines.io.report import build_fit_result, load_report, render_table, scores_frame, write_report
from latentee.engines.outcome import Scheme
from latentee.errors import JoinError, MissingCovariate, ParseError, SpecError
from tests.builders import one_latent_params, simulated

ROOT = Path(__file__).parent.parent.parent

TOY_CONFIG = {
    "name": "toy",
    "subject_covariates": ["w"],
    "latents": [{"name": "u", "on_covariates": ["w"]}],
    "surrogates": [
        {"name": "x1", "loadings": {"u": 1.0}, "intercept": 0.0},
        {"name": "x2", "loadings": {"u": "free"}},
        {"name": "x3", "loadings": {"u": "free"}, "item_bias": ["w"]},
    ],
    "latent_covariance": "diagonal",
    "outcome": {"response": "y", "latents": ["u"], "covariates": ["t"], "covariance": {"structure": "cs"}},
}

SUBJECTS = "id,w,x1,x2,x3\na,0.5,1.0,,2.0\nb,-0.2,0.3,0.4,0.1\n"
OUTCOMES = "id,occasion,y,t\na,2,3.0,1.0\na,1,2.5,0.0\nb,1,1.0,0.0\n"


class TestModelConfig:
    """Test model configuration loading"""

    def setup_method(self):
        """Setup test environment"""
        self.temp_dir = tempfile.mkdtemp()
        self.loader = ModelConfigLoader()

    def test_toy_layout_matches_builder(self):
        """The toy configuration builds the one-latent test model"""
        spec = self.loader.load_from_dict(TOY_CONFIG).to_spec()
        assert spec.layout.names == one_latent_params().spec.layout.names

    def test_shipped_element_model(self):
        """The shipped applied model validates"""
        config = self.loader.load(ROOT / "configs" / "element.yaml")
        spec = config.to_spec()
        assert spec.l == 6
        assert spec.p == 23
        assert [spec.latents[k] for k in spec.outcome_latents] == ["circ_t1", "postnatal"]
        assert len(spec.delta_cov.blocks) == 2
        assert spec.outcome_cov.kind.value == "cs"
        assert int(np.isnan(spec.gamma1_pattern).sum()) == 6

    def test_outcome_override(self):
        """The outcome structure can be overridden"""
        spec = self.loader.load_from_dict(TOY_CONFIG).to_spec("ar1")
        assert spec.layout.theta2_names == ["omega_eps.sigma2", "omega_eps.rho"]

    def test_unknown_key(self):
        """Unknown keys are rejected with their location"""
        with pytest.raises(ParseError) as exc:
            self.loader.load_from_dict({**TOY_CONFIG, "colour": "blue"})
        assert exc.value.column == "colour"

    def test_unknown_latent(self):
        """Loadings on undeclared latents are spec errors"""
        data = json.loads(json.dumps(TOY_CONFIG))
        data["surrogates"][1]["loadings"] = {"v": "free"}
        with pytest.raises(SpecError):
            self.loader.load_from_dict(data).to_spec()

    def test_malformed_yaml(self):
        """Malformed YAML raises ParseError"""
        path = Path(self.temp_dir) / "bad.yaml"
        path.write_text("name: [unterminated\n", encoding="utf-8")
        with pytest.raises(ParseError):
            self.loader.load(path)

    def test_missing_file(self):
        """A missing file raises ParseError"""
        with pytest.raises(ParseError):
            self.loader.load(Path(self.temp_dir) / "absent.yaml")

    def test_dump_and_reload(self):
        """Dumped configurations reload unchanged"""
        config = self.loader.load_from_dict(TOY_CONFIG)
        path = Path(self.temp_dir) / "toy.yaml"
        self.loader.dump(config, path)
        assert self.loader.load(path).config_hash() == config.config_hash()


class TestLoader:
    """Test the two-file data bundle"""

    def setup_method(self):
        """Setup test environment"""
        self.temp_dir = Path(tempfile.mkdtemp())
        self.config = ModelConfigLoader().load_from_dict(TOY_CONFIG)

    def _write(self, subjects=SUBJECTS, outcomes=OUTCOMES):
        s, o = self.temp_dir / "subjects.csv", self.temp_dir / "outcomes.csv"
        s.write_text(subjects, encoding="utf-8")
        o.write_text(outcomes, encoding="utf-8")
        return s, o

    def test_load(self):
        """Missing cells become masks and occasions are sorted"""
        dataset = load_data(*self._write(), self.config)
        assert dataset.N == 2
        assert dataset.ids == ["a", "b"]
        np.testing.assert_array_equal(dataset.M[0], [True, False, True])
        np.testing.assert_allclose(dataset.subjects[0].y, [2.5, 3.0])
        np.testing.assert_allclose(dataset.subjects[0].z[:, 0], [0.0, 1.0])
        assert dataset.pattern_counts == {"101": 1, "111": 1}

    def test_subject_without_outcomes(self):
        """Subjects with no outcome rows are kept"""
        dataset = load_data(*self._write(outcomes="id,occasion,y,t\na,1,2.5,0.0\n"), self.config)
        assert dataset.n_i.tolist() == [1, 0]

    def test_unknown_subject(self):
        """Outcome rows for unknown subjects raise JoinError"""
        with pytest.raises(JoinError) as exc:
            load_data(*self._write(outcomes=OUTCOMES + "c,1,1.0,0.0\n"), self.config)
        assert exc.value.line == 5

    def test_missing_covariate(self):
        """Empty covariate cells raise MissingCovariate"""
        with pytest.raises(MissingCovariate) as exc:
            load_data(*self._write(subjects="id,w,x1,x2,x3\na,,1.0,,2.0\n"), self.config)
        assert exc.value.column == "w"

    def test_duplicate_id(self):
        """Duplicate subject ids are parse errors"""
        with pytest.raises(ParseError) as exc:
            load_data(*self._write(subjects=SUBJECTS + "a,0.1,1,1,1\n"), self.config)
        assert exc.value.line == 4

    def test_occasion_gap(self):
        """Occasions must run 1..n_i"""
        with pytest.raises(ParseError):
            load_data(*self._write(outcomes="id,occasion,y,t\na,1,2.5,0.0\na,3,3.0,1.0\n"), self.config)

    def test_non_numeric(self):
        """Non-numeric surrogate cells are parse errors"""
        with pytest.raises(ParseError) as exc:
            load_data(*self._write(subjects="id,w,x1,x2,x3\na,0.5,high,,2.0\n"), self.config)
        assert exc.value.column == "x1"

    @pytest.mark.parametrize("cell", ["inf", "-inf"])
    def test_non_finite(self, cell):
        """Infinite cells are parse errors naming their line"""
        with pytest.raises(ParseError) as exc:
            load_data(*self._write(outcomes=f"id,occasion,y,t\na,1,2.5,0.0\na,2,{cell},1.0\n"), self.config)
        assert exc.value.line == 3
        assert exc.value.column == "y"

    def test_missing_column(self):
        """Declared columns must be present"""
        with pytest.raises(ParseError):
            load_data(*self._write(subjects="id,w,x1,x2\na,0.5,1.0,2.0\n"), self.config)

    def test_write_and_reload(self):
        """A written dataset reloads with identical values"""
        params = one_latent_params()
        dataset = simulated(params, n=25, seed=51)
        s, o = self.temp_dir / "s.csv", self.temp_dir / "o.csv"
        write_dataset(dataset, s, o)
        back = load_data(s, o, self.config)
        assert back.ids == dataset.ids
        np.testing.assert_array_equal(back.M, dataset.M)
        np.testing.assert_array_equal(back.X, dataset.X)
        np.testing.assert_array_equal(back.n_i, dataset.n_i)
        for a, b in zip(back.subjects, dataset.subjects):
            np.testing.assert_array_equal(a.y, b.y)


class TestReport:
    """Test fit reports"""

    def setup_method(self):
        """Setup test environment"""
        self.temp_dir = Path(tempfile.mkdtemp())
        self.params = one_latent_params()
        self.dataset = simulated(self.params, n=200, seed=52)

    def test_report_files(self):
        """JSON, text and score files are written and the JSON reloads"""
        fit = fit_model(self.params.spec, self.dataset, "rc")
        result = build_fit_result(fit, config_hash="abc", seed=9)
        paths = write_report(result, self.temp_dir / "run" / "toy", fit)
        assert all(p.exists() for p in paths.values())
        back = load_report(paths["json"])
        assert back.parameter("beta[u]").estimate == result.parameter("beta[u]").estimate
        assert back.seed == 9
        assert back.variance_terms is not None
        assert back.variance_terms.decomposition_error < 1e-8
        scores = scores_frame(fit)
        assert list(scores.columns) == ["id", "pattern", "u_tilde[u]", "psi_tilde[u]"]
        assert len(scores) == self.dataset.N

    def test_table(self):
        """Table rows show estimate, s.e., p-value and interval at four decimals"""
        fit = fit_model(self.params.spec, self.dataset, "ee1")
        result = build_fit_result(fit)
        table = render_table(result)
        row = result.parameter("beta[u]")
        expected = f"{'beta[u]':<28}{row.estimate:>10.4f}{row.se:>10.4f}{row.p_two_sided:>10.4f}"
        assert expected in table
        assert "full precision:" in table
        assert "psi." not in table.split("full precision:")[0]

    def test_unconverged_fit_has_no_inference(self):
        """A fit that did not converge reports estimates only"""
        spec = self.params.spec
        fit = ModelFit(spec=spec, dataset=self.dataset, method="ee1", scheme=Scheme.ee1(), params=self.params,
                       converged=False, iterations=200, norm=1.0, loglik=None,
                       covariance=np.eye(spec.layout.size))
        result = build_fit_result(fit)
        assert all(r.se is None and r.p_two_sided is None for r in result.parameters)
        assert result.covariance is None

    def test_load_missing_report(self):
        """Loading a missing report is a parse error"""
        with pytest.raises(ParseError):
            load_report(self.temp_dir / "absent.report.json")
