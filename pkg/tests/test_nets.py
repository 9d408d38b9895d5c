import numpy as np
import pytest

from prunemia.nets import (
    MLP,
    AttentionAttackSpec,
    MlpSpec,
    SamiaNet,
    attention_block,
    init_mlp,
    init_samia,
    load_checkpoint,
    mlp_forward,
    multi_head_attention,
    samia_forward,
    save_checkpoint,
)
from prunemia.rng import substream
from prunemia.tensor import ShapeError, Tensor, cross_entropy

from .helpers import finite_difference_check


def _identity_params(dim: int, prefix: str = "blk") -> dict[str, Tensor]:
    params = {}
    for proj in ("q", "k", "v", "o"):
        params[f"{prefix}.{proj}.weight"] = Tensor(np.eye(dim))
        params[f"{prefix}.{proj}.bias"] = Tensor(np.zeros(dim))
    return params


class TestMlp:
    def test_default_widths(self):
        spec = MlpSpec(10, 3)
        assert spec.hidden == (256, 128)
        params = init_mlp(spec, substream(0, "t"))
        assert params["fc0.weight"].shape == (256, 10)
        assert params["fc2.weight"].shape == (3, 128)

    def test_invalid_widths(self):
        with pytest.raises(ValueError):
            MlpSpec(10, 3, hidden=(0,))

    def test_zero_params_uniform(self):
        params = {k: np.zeros_like(v) for k, v in init_mlp(MlpSpec(4, 5, (3,)), substream(0, "z")).items()}
        np.testing.assert_allclose(mlp_forward(params, np.ones((2, 4))), 0.2, atol=1e-15)

    def test_toy_hand_computed(self):
        params = {
            "fc0.weight": np.ones((1, 1)), "fc0.bias": np.ones(1),
            "fc1.weight": np.ones((2, 1)), "fc1.bias": np.array([1.0, 0.0]),
        }
        # hidden = relu(1*1 + 1) = 2; logits = (3, 2)
        expected = np.exp([3.0, 2.0]) / np.exp([3.0, 2.0]).sum()
        np.testing.assert_allclose(mlp_forward(params, np.array([[1.0]]))[0], expected, atol=1e-12)

    def test_zero_scale_equals_masked_row(self):
        spec = MlpSpec(6, 3, (5, 4), use_scales=True)
        params = init_mlp(spec, substream(1, "s"))
        x = substream(1, "x").normal(size=(7, 6))
        scaled = dict(params)
        scaled["fc0.scale"] = params["fc0.scale"].copy()
        scaled["fc0.scale"][2] = 0.0
        masked = dict(params)
        masked["fc0.weight"] = params["fc0.weight"].copy()
        masked["fc0.weight"][2] = 0.0
        masked["fc0.bias"] = params["fc0.bias"].copy()
        masked["fc0.bias"][2] = 0.0
        np.testing.assert_array_equal(mlp_forward(scaled, x), mlp_forward(masked, x))

    def test_rows_sum_to_one(self):
        model = MLP.initialise(MlpSpec(8, 4, (6,)), substream(2, "m"))
        p = model(substream(2, "x").normal(size=(50, 8)) * 10)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_dimension_mismatch(self):
        model = MLP.initialise(MlpSpec(8, 4, (6,)), substream(2, "m"))
        with pytest.raises(ShapeError):
            model(np.ones((2, 7)))

    def test_gradients_finite_difference(self):
        model = MLP.initialise(MlpSpec(5, 3, (4, 3), use_scales=True), substream(3, "g"))
        x = substream(3, "x").normal(size=(6, 5))
        y = np.array([0, 1, 2, 0, 1, 2])
        err = finite_difference_check(lambda: cross_entropy(model.logits(x), y), list(model.params.values()))
        assert err < 1e-4


class TestAttention:
    def test_single_token_returns_value(self):
        params = _identity_params(8)
        tok = Tensor(substream(0, "a").normal(size=(1, 8)))
        out, weights = multi_head_attention(tok, params, "blk", heads=4)
        np.testing.assert_array_equal(weights, np.ones((4, 1, 1)))
        np.testing.assert_allclose(out.data, tok.data, atol=1e-15)

    def test_identical_tokens_uniform_weights(self):
        rng = substream(0, "b")
        params = {k: Tensor(rng.normal(size=v.shape)) for k, v in _identity_params(8).items()}
        row = rng.normal(size=8)
        tokens = Tensor(np.tile(row, (3, 1)))
        out, weights = multi_head_attention(tokens, params, "blk", heads=2)
        np.testing.assert_allclose(weights, 1 / 3, atol=1e-15)
        v = row @ params["blk.v.weight"].data.T + params["blk.v.bias"].data
        expected = v @ params["blk.o.weight"].data.T + params["blk.o.bias"].data
        np.testing.assert_allclose(out.data, np.tile(expected, (3, 1)), atol=1e-12)

    def test_two_tokens_hand_softmax(self):
        x = np.array([[1.0, 0.5, -0.3, 0.2], [0.1, -1.0, 0.7, 0.4]])
        _, weights = multi_head_attention(Tensor(x), _identity_params(4), "blk", heads=1)
        scores = x @ x.T / np.sqrt(4)
        expected = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(weights[0], expected, atol=1e-10)

    def test_block_rejects_non_finite(self):
        spec = AttentionAttackSpec(3, model_dim=8, heads=2, blocks=1)
        net = SamiaNet.initialise(spec, substream(0, "n"))
        with pytest.raises(ValueError):
            attention_block(Tensor(np.full((2, 8), np.nan)), net.params, "block0", spec)

    def test_block_shape(self):
        spec = AttentionAttackSpec(3)
        net = SamiaNet.initialise(spec, substream(0, "n"))
        out = attention_block(Tensor(np.ones((5, 64))), net.params, "block0", spec)
        assert out.shape == (5, 64)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            AttentionAttackSpec(3, model_dim=10, heads=4)


class TestSamia:
    def _inputs(self, k=5, n=4, seed=0):
        rng = substream(seed, "inputs")
        post = rng.dirichlet(np.ones(k), size=n)
        return post, rng.random((n, k)), np.eye(k)[rng.integers(0, k, n)]

    def test_output_is_distribution(self):
        spec = AttentionAttackSpec(5)
        out = samia_forward(spec, init_samia(spec, substream(0, "s")), *self._inputs())
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_final_layer_is_even(self):
        spec = AttentionAttackSpec(5)
        params = init_samia(spec, substream(0, "s"))
        params["head2.weight"][:] = 0.0
        np.testing.assert_array_equal(samia_forward(spec, params, *self._inputs()), 0.5)

    def test_golden_value_and_permutation(self):
        spec = AttentionAttackSpec(5)
        params = init_samia(spec, substream(7, "golden"))
        rng = substream(7, "golden-input")
        post, sens, onehot = rng.dirichlet(np.ones(5)), rng.random(5), np.eye(5)[2]
        np.testing.assert_allclose(samia_forward(spec, params, post, sens, onehot),
                                   [[0.6343008358310886, 0.3656991641689114]], rtol=1e-10)
        perm = np.array([3, 0, 4, 1, 2])
        np.testing.assert_allclose(samia_forward(spec, params, post[perm], sens[perm], onehot[perm]),
                                   [[0.31560559965513385, 0.6843944003448662]], rtol=1e-10)

    def test_k_mismatch(self):
        spec = AttentionAttackSpec(5)
        post, sens, onehot = self._inputs(k=4)
        with pytest.raises(ShapeError):
            samia_forward(spec, init_samia(spec, substream(0, "s")), post, sens, onehot)

    def test_eval_mode_deterministic(self):
        spec = AttentionAttackSpec(5)
        net = SamiaNet.initialise(spec, substream(0, "s"))
        a = net.predict_proba(*self._inputs())
        b = net.predict_proba(*self._inputs())
        assert a.tobytes() == b.tobytes()

    def test_gradients_finite_difference(self):
        spec = AttentionAttackSpec(4, model_dim=8, heads=2, blocks=2, dropout=0.0)
        net = SamiaNet.initialise(spec, substream(4, "fd"))
        inputs = self._inputs(k=4, n=3, seed=4)
        y = np.array([0, 1, 1])
        err = finite_difference_check(lambda: cross_entropy(net.logits(*inputs), y),
                                      list(net.params.values()))
        assert err < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = MlpSpec(4, 3, (5,), use_scales=True)
        params = init_mlp(spec, substream(0, "c"))
        mask = {k: np.ones_like(v) for k, v in params.items()}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, spec, params, mask, {"gamma": 0.5})
        assert path.read_bytes().startswith(b"PRUNEMIA-CKPT-1")
        ckpt = load_checkpoint(path)
        assert ckpt.spec == spec
        assert ckpt.extra == {"gamma": 0.5}
        for k in params:
            np.testing.assert_array_equal(ckpt.params[k], params[k])
            np.testing.assert_array_equal(ckpt.mask[k], mask[k])

    def test_samia_round_trip(self, tmp_path):
        spec = AttentionAttackSpec(3)
        params = init_samia(spec, substream(0, "c"))
        save_checkpoint(tmp_path / "a.ckpt", spec, params)
        ckpt = load_checkpoint(tmp_path / "a.ckpt")
        assert ckpt.spec == spec and ckpt.mask is None

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(tmp_path / "x.ckpt")
