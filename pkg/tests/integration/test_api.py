"""
Integration tests for API endpoints
"""
import json
import sys
from pathlib import Path
from fastapi.testclient import TestClient

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from latentee.main import app
from tests.builders import one_latent_params, simulated
from tests.unit.test_io import TOY_CONFIG

client = TestClient(app)


def records(dataset):
    """Subject and outcome rows as the fit endpoint takes them"""
    subjects, outcomes = [], []
    for s in dataset.subjects:
        subjects.append({"id": s.id, "w": float(s.w[0]), **{f"x{j + 1}": float(v) for j, v in enumerate(s.x)}})
        for t in range(s.n_i):
            outcomes.append({"id": s.id, "occasion": t + 1, "y": float(s.y[t]), "t": float(s.z[t, 0])})
    return subjects, outcomes


class TestCoreEndpoints:
    """Test core API endpoints"""

    def test_root_endpoint(self):
        """Test root endpoint"""
        response = client.get("/")
        assert response.status_code == 200
        data = response.json()
        assert "name" in data
        assert "version" in data
        assert data["status"] == "running"

    def test_health_endpoint(self):
        """Test health check endpoint"""
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json()["status"] == "healthy"


class TestModelEndpoints:
    """Test model validation"""

    def test_validate(self):
        """A valid configuration reports its parameter order"""
        response = client.post("/api/model/validate", json={"config": TOY_CONFIG})
        assert response.status_code == 200
        data = response.json()
        assert data["valid"] is True
        assert data["counts"]["theta1"] == 3
        assert data["parameters"][:3] == ["beta0", "beta[u]", "kappa[t]"]

    def test_validate_override(self):
        """The outcome structure can be overridden"""
        response = client.post("/api/model/validate", json={"config": TOY_CONFIG, "outcome_cov": "ar1"})
        assert response.status_code == 200
        assert "omega_eps.rho" in response.json()["parameters"]

    def test_validate_unknown_latent(self):
        """Semantic configuration errors are bad requests"""
        config = json.loads(json.dumps(TOY_CONFIG))
        config["outcome"]["latents"] = ["v"]
        response = client.post("/api/model/validate", json={"config": config})
        assert response.status_code == 400
        assert response.json()["detail"]["kind"] == "parse"

    def test_validate_unknown_key(self):
        """Unknown configuration keys fail request validation"""
        response = client.post("/api/model/validate", json={"config": {**TOY_CONFIG, "colour": "blue"}})
        assert response.status_code == 422


class TestFitEndpoint:
    """Test fitting inline records"""

    def setup_method(self):
        """Setup test environment"""
        self.dataset = simulated(one_latent_params(), n=120, seed=81, missing=False)
        self.subjects, self.outcomes = records(self.dataset)

    def test_fit_rc(self):
        """An RC fit returns estimates with sandwich standard errors"""
        response = client.post("/api/fit", json={
            "config": TOY_CONFIG, "subjects": self.subjects, "outcomes": self.outcomes, "method": "rc",
        })
        assert response.status_code == 200
        data = response.json()
        assert data["method"] == "rc"
        rows = {p["name"]: p for p in data["parameters"]}
        assert rows["beta[u]"]["se"] > 0
        assert rows["beta[u]"]["ci_low"] < rows["beta[u]"]["estimate"] < rows["beta[u]"]["ci_high"]

    def test_ee2_requires_beta_star(self):
        """ee2 without beta* is a bad request"""
        response = client.post("/api/fit", json={
            "config": TOY_CONFIG, "subjects": self.subjects, "outcomes": self.outcomes, "method": "ee2",
        })
        assert response.status_code == 400

    def test_unknown_subject(self):
        """Outcome rows for unknown subjects are bad requests"""
        outcomes = self.outcomes + [{"id": "nobody", "occasion": 1, "y": 0.0, "t": 0.0}]
        response = client.post("/api/fit", json={
            "config": TOY_CONFIG, "subjects": self.subjects, "outcomes": outcomes, "method": "rc",
        })
        assert response.status_code == 400
        assert response.json()["detail"]["details"]["line"] == len(outcomes) + 1

    def test_unexpected_failure(self, monkeypatch):
        """Exceptions outside the error hierarchy come back as a JSON error object"""
        def broken(*args, **kwargs):
            raise ValueError("cannot reshape array")

        monkeypatch.setattr("latentee.api.routes.fit_model", broken)
        response = client.post("/api/fit", json={
            "config": TOY_CONFIG, "subjects": self.subjects, "outcomes": self.outcomes, "method": "rc",
        })
        assert response.status_code == 500
        detail = response.json()["detail"]
        assert detail["kind"] == "internal"
        assert detail["error"] == "InternalError"
        assert "ValueError: cannot reshape array" in detail["message"]


class TestSimulateEndpoint:
    """Test simulation runs"""

    def test_small_bias_run(self):
        """A tiny bias design returns one row per cell and method"""
        design = {"kind": "bias", "n": 100, "reps": 2, "occasions": 3, "betas": [0.5], "rhos": [0.5],
                  "true_cov": "cs", "fit_covs": ["cs"], "methods": ["ee1", "rc"]}
        response = client.post("/api/simulate", json={"design": design})
        assert response.status_code == 200
        data = response.json()
        assert data["kind"] == "bias"
        assert [row["method"] for row in data["cells"]] == ["ee1", "rc"]
        assert all(row["n_ok"] + row["n_failed"] == 2 for row in data["cells"])

    def test_invalid_design(self):
        """Designs failing validation are rejected"""
        response = client.post("/api/simulate", json={"design": {"kind": "bias", "me_fractions": [1.5]}})
        assert response.status_code == 422
