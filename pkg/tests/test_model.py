import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s5dscr.autograd import Tensor, grad_check, mse_loss
from s5dscr.errors import (
    BadMagicError,
    CorruptFileError,
    ShapeMismatchError,
    UnsupportedVersionError,
)
from s5dscr.model import (
    ModelConfig,
    forward,
    init_weights,
    load_weights,
    param_count,
    predict,
    save_weights,
    zero_weights,
)
from s5dscr.resample import bicubic_upsample

from oracles import relu_kink_margin


class TestModelConfig:
    def test_pointwise_default_depends_on_depth(self):
        assert ModelConfig(channels=8, n_modules=5).pointwise_per_module == 3
        assert ModelConfig(channels=8, n_modules=1).pointwise_per_module == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(channels=0)
        with pytest.raises(ValueError):
            ModelConfig(channels=8, dw_kernel=4)
        with pytest.raises(ValueError):
            ModelConfig(channels=8, n_modules=0)

    def test_dict_round_trip(self):
        cfg = ModelConfig(channels=16, n_modules=5, share_module_weights=True)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParamCount:
    def test_published_budgets(self):
        # lightweight variant
        assert param_count(ModelConfig(channels=480, n_modules=1)) == 243_360
        assert param_count(ModelConfig(channels=497, n_modules=1)) == 260_428
        assert abs(243_360 - 0.24e6) / 0.24e6 < 0.05
        assert abs(260_428 - 0.25e6) / 0.25e6 < 0.05
        # full variant
        full_497 = param_count(ModelConfig(channels=497, n_modules=5))
        full_480 = param_count(ModelConfig(channels=480, n_modules=5))
        assert full_497 == 3_777_200
        assert abs(full_497 - 3.9e6) / 3.9e6 < 0.05
        assert abs(full_480 - 3.6e6) / 3.6e6 < 0.05

    def test_weight_sharing_counts_one_module(self):
        shared = ModelConfig(channels=16, n_modules=5, share_module_weights=True)
        single = ModelConfig(channels=16, n_modules=1, pointwise_per_module=3)
        assert param_count(shared) == param_count(single)

    @given(
        c=st.integers(1, 24),
        l=st.integers(1, 4),
        k=st.sampled_from([1, 3, 5, 7]),
        m_p=st.integers(1, 4),
        share=st.booleans(),
    )
    @settings(max_examples=40, deadline=None)
    def test_count_matches_allocation(self, c, l, k, m_p, share):
        cfg = ModelConfig(
            channels=c, n_modules=l, dw_kernel=k, pointwise_per_module=m_p,
            share_module_weights=share,
        )
        weights = init_weights(cfg, seed=0)
        assert param_count(cfg) == weights.n_params()


class TestInitWeights:
    def test_biases_zero(self):
        w = init_weights(ModelConfig(channels=4, n_modules=2), seed=1)
        for mod in w.modules:
            assert not mod.dw_bias.any()
            for b in mod.pw_biases:
                assert not b.any()

    def test_deterministic(self):
        cfg = ModelConfig(channels=4, n_modules=2)
        a = init_weights(cfg, seed=3).param_arrays()
        b = init_weights(cfg, seed=3).param_arrays()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_magnitude_bounds(self):
        cfg = ModelConfig(channels=16, n_modules=1, dw_kernel=5)
        w = init_weights(cfg, seed=5)
        dw_bound = np.sqrt(6.0 / 25.0)
        pw_bound = np.sqrt(6.0 / 16.0)
        assert np.abs(w.modules[0].dw_kernel).max() <= dw_bound
        assert np.abs(w.modules[0].pw_weights[0]).max() <= pw_bound


class TestForward:
    def test_zero_weights_is_bicubic_identity(self):
        cfg = ModelConfig(channels=8, n_modules=1)
        w = zero_weights(cfg)
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = rng.random((1, 8, 12, 10)).astype(np.float32)
            out = forward(w, x).data
            np.testing.assert_array_equal(out, bicubic_upsample(x, 4))

    def test_shape_contract(self):
        cfg = ModelConfig(channels=8, n_modules=1)
        w = init_weights(cfg, seed=0)
        out = forward(w, np.zeros((1, 8, 16, 16), dtype=np.float32))
        assert out.data.shape == (1, 8, 64, 64)

    def test_channel_mismatch(self):
        w = init_weights(ModelConfig(channels=8, n_modules=1), seed=0)
        with pytest.raises(ShapeMismatchError):
            forward(w, np.zeros((1, 4, 8, 8), dtype=np.float32))

    def test_constant_input_constant_interior(self):
        # zero padding corrupts a k//2 ring per depthwise layer; away from
        # that ring every layer maps constants to constants
        cfg = ModelConfig(channels=3, n_modules=2, pointwise_per_module=2)
        w = init_weights(cfg, seed=7)
        x = np.full((1, 3, 8, 8), 0.37, dtype=np.float32)
        out = forward(w, x).data
        ring = cfg.n_modules * (cfg.dw_kernel // 2)
        interior = out[0, :, ring:-ring, ring:-ring]
        for ch in range(3):
            assert interior[ch].max() == interior[ch].min()

    def test_shared_weights_forward(self):
        cfg = ModelConfig(channels=4, n_modules=3, share_module_weights=True)
        w = init_weights(cfg, seed=2)
        out = forward(w, np.random.default_rng(0).random((1, 4, 8, 8)).astype(np.float32))
        assert out.data.shape == (1, 4, 32, 32)

    def test_predict_squeezes_single_cube(self):
        cfg = ModelConfig(channels=4, n_modules=1)
        w = init_weights(cfg, seed=0)
        out = predict(w, np.zeros((4, 8, 8), dtype=np.float32))
        assert out.shape == (4, 32, 32)


def model_gradcheck_builder(cfg, seed):
    """Deterministic loss builder at a kink-safe evaluation point."""
    from s5dscr.model import TensorWeights

    from oracles import kink_safe_model_arrays

    rng = np.random.default_rng(seed)
    x = rng.random((1, cfg.channels, 8, 8))
    arrays = kink_safe_model_arrays(cfg, x, seed)
    target = rng.random((1, cfg.channels, 8 * cfg.scale, 8 * cfg.scale))

    def builder():
        tw = TensorWeights.from_arrays(cfg, arrays, requires_grad=True)
        loss = mse_loss(forward(tw, x), Tensor(target))
        return loss, tw.params()

    return builder


class TestEndToEndGradcheck:
    def test_tiny_config_gradcheck(self):
        cfg = ModelConfig(channels=3, n_modules=2, pointwise_per_module=2, scale=4)
        builder = model_gradcheck_builder(cfg, seed=0)
        loss, _ = builder()
        assert relu_kink_margin(loss) >= 0.5
        report = grad_check(builder)
        assert report.passed, report.summary()

    def test_kink_safe_points_have_mixed_masks(self):
        cfg = ModelConfig(channels=3, n_modules=2, pointwise_per_module=2, scale=4)
        loss, _ = model_gradcheck_builder(cfg, seed=0)()
        # walk the graph: every relu output must contain both zeros and positives
        seen, stack = {id(loss)}, [loss]
        relu_nodes = []
        while stack:
            node = stack.pop()
            if node.op == "relu":
                relu_nodes.append(node)
            for p in node._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        assert relu_nodes
        for node in relu_nodes:
            assert (node.data == 0).any() and (node.data > 0).any()


class TestWeightIO:
    def make_weights(self):
        cfg = ModelConfig(channels=6, n_modules=2, pointwise_per_module=2)
        return init_weights(cfg, seed=9)

    def test_round_trip_bit_identical(self, tmp_path):
        w = self.make_weights()
        path = tmp_path / "w.dscw"
        save_weights(w, path)
        loaded = load_weights(path)
        assert loaded.config == w.config
        for name, arr in w.param_arrays().items():
            np.testing.assert_array_equal(loaded.param_arrays()[name], arr)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dscw"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(BadMagicError):
            load_weights(path)

    def test_truncated_is_corrupt(self, tmp_path):
        w = self.make_weights()
        path = tmp_path / "w.dscw"
        save_weights(w, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CorruptFileError):
            load_weights(path)

    def test_version_mismatch(self, tmp_path):
        w = self.make_weights()
        path = tmp_path / "w.dscw"
        save_weights(w, path)
        raw = bytearray(path.read_bytes())
        raw[4:6] = (7).to_bytes(2, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_weights(path)

    def test_channel_mismatch_against_expectation(self, tmp_path):
        cfg497 = ModelConfig(channels=497, n_modules=1)
        cfg480 = ModelConfig(channels=480, n_modules=1)
        path = tmp_path / "w497.dscw"
        save_weights(init_weights(cfg497, seed=0), path)
        with pytest.raises(ShapeMismatchError):
            load_weights(path, expect_config=cfg480)
