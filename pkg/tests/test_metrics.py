import numpy as np
import pytest

from prunemia.data import Dataset
from prunemia.metrics import (
    SensitivityConfig,
    confidence_gap,
    gap_report,
    generalization_gap,
    noise_vectors,
    prediction_sensitivity,
    sensitivity_gap,
)
from prunemia.nets import MLP, MlpSpec, init_mlp, mlp_forward
from prunemia.rng import substream

from .helpers import literal_ps


@pytest.fixture(scope="module")
def model():
    return MLP.initialise(MlpSpec(6, 3, (8,)), substream(0, "metrics"))


@pytest.fixture(scope="module")
def sets():
    rng = substream(0, "metric-data")
    a = Dataset(rng.normal(size=(10, 6)), rng.integers(0, 3, 10), num_classes=3, ids=np.arange(10))
    b = Dataset(rng.normal(size=(12, 6)), rng.integers(0, 3, 12), num_classes=3, ids=np.arange(10, 22))
    return a, b


class FixedPosterior:
    """Model stub returning a stored posterior per input row (keyed by the first feature)."""

    def __init__(self, table):
        self.table = table

    def __call__(self, x):
        return np.array([self.table[int(round(v))] for v in x[:, 0]])


class TestSensitivity:
    def test_constant_model_zero(self):
        params = {k: np.zeros_like(v) for k, v in init_mlp(MlpSpec(4, 3, (5,)), substream(0, "c")).items()}
        ps = prediction_sensitivity(lambda x: mlp_forward(params, x), np.ones((3, 4)))
        np.testing.assert_array_equal(ps, 0.0)

    def test_linear_probe_epsilon_free(self):
        w = substream(0, "w").normal(size=(3, 5))
        probe = lambda x: x @ w.T  # noqa: E731
        x = substream(0, "x").normal(size=(4, 5))
        small = prediction_sensitivity(probe, x, SensitivityConfig(epsilon=1e-3))
        large = prediction_sensitivity(probe, x, SensitivityConfig(epsilon=1e-1))
        np.testing.assert_allclose(small, large, atol=1e-9)

    def test_matches_literal_loop(self, model, sets):
        members, _ = sets
        cfg = SensitivityConfig(n=10, epsilon=1e-3, seed=3)
        ps = prediction_sensitivity(model, members.features, cfg, members.ids)
        for row, x, i in zip(ps, members.features, members.ids):
            np.testing.assert_allclose(row, literal_ps(model, x, noise_vectors(cfg, i, 6), 1e-3), rtol=0, atol=1e-12)

    def test_non_negative_and_repeatable(self, model, sets):
        cfg = SensitivityConfig(seed=1)
        a = prediction_sensitivity(model, sets[0].features, cfg, sets[0].ids)
        b = prediction_sensitivity(model, sets[0].features, cfg, sets[0].ids)
        assert np.all(a >= 0)
        assert a.tobytes() == b.tobytes()

    def test_chunking_invariant(self, model, sets):
        cfg = SensitivityConfig(seed=1)
        a = prediction_sensitivity(model, sets[1].features, cfg, sets[1].ids, chunk=5)
        b = prediction_sensitivity(model, sets[1].features, cfg, sets[1].ids, chunk=256)
        np.testing.assert_array_equal(a, b)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SensitivityConfig(n=0)
        with pytest.raises(ValueError):
            SensitivityConfig(epsilon=0.0)


class TestGaps:
    def test_same_set_zero(self, model, sets):
        assert confidence_gap(model, sets[0], sets[0])[0] == 0.0
        assert sensitivity_gap(model, sets[0], sets[0])[0] == 0.0
        assert generalization_gap(model, sets[0], sets[0]) == 0.0

    def test_singleton_confidence_gap(self):
        stub = FixedPosterior({0: [0.9, 0.1], 1: [0.6, 0.4]})
        a = Dataset(np.array([[0.0]]), np.array([0]), num_classes=2)
        b = Dataset(np.array([[1.0]]), np.array([0]), num_classes=2)
        assert confidence_gap(stub, a, b)[0] == pytest.approx(0.3, abs=1e-15)

    def test_constant_model_sensitivity_gap_zero(self, sets):
        stub = lambda x: np.full((len(x), 3), 1 / 3)  # noqa: E731
        assert sensitivity_gap(stub, *sets)[0] == 0.0

    def test_generalization_gap_hand_built(self):
        stub = FixedPosterior({0: [1.0, 0.0], 1: [0.0, 1.0]})
        train = Dataset(np.array([[0.0], [1.0]]), np.array([0, 1]), num_classes=2)
        test = Dataset(np.array([[0.0]] * 5), np.array([0, 0, 0, 1, 1]), num_classes=2)
        assert generalization_gap(stub, train, test) == pytest.approx(0.4)

    def test_literal_oracles(self, model, sets):
        members, non_members = sets
        cfg = SensitivityConfig(seed=5)
        post_in = model(members.features)[np.arange(10), members.labels]
        post_out = model(non_members.features)[np.arange(12), non_members.labels]
        assert confidence_gap(model, members, non_members)[0] == pytest.approx(
            post_in.mean() - post_out.mean(), abs=1e-12)

        def gt_ps(data):
            return np.array([literal_ps(model, x, noise_vectors(cfg, i, 6), cfg.epsilon)[y]
                             for x, y, i in zip(data.features, data.labels, data.ids)])

        expected = gt_ps(members).mean() - gt_ps(non_members).mean()
        assert sensitivity_gap(model, members, non_members, cfg)[0] == pytest.approx(expected, abs=1e-12)

    def test_antisymmetry(self, model, sets):
        a, b = sets
        cfg = SensitivityConfig(seed=2)
        assert confidence_gap(model, a, b)[0] == -confidence_gap(model, b, a)[0]
        assert sensitivity_gap(model, a, b, cfg)[0] == -sensitivity_gap(model, b, a, cfg)[0]
        assert generalization_gap(model, a, b) == -generalization_gap(model, b, a)

    def test_empty_rejected(self, model, sets):
        empty = sets[0].subset(np.array([], dtype=int))
        with pytest.raises(ValueError):
            confidence_gap(model, empty, sets[1])
        with pytest.raises(ValueError):
            sensitivity_gap(model, sets[0], empty)
        with pytest.raises(ValueError):
            generalization_gap(model, empty, sets[1])

    def test_per_class_breakdown(self, model, sets):
        gap, per_class = confidence_gap(model, *sets)
        assert per_class.shape == (3,)
        assert np.all(np.isfinite(per_class))

    def test_report_finite(self, model, sets):
        report = gap_report(model, *sets, SensitivityConfig())
        values = [report.confidence_gap, report.sensitivity_gap, report.generalization_gap,
                  *report.per_class_confidence_gap, *report.per_class_sensitivity_gap]
        assert np.all(np.isfinite(values))
