import numpy as np
import pytest

from fpsa.attention import (
    FpsaLayer,
    SpectralNorm,
    attention_maps,
    attention_step,
    forward,
    power_iteration,
    solve_state,
    spectral_normalize,
    value_static,
    vanilla_attention,
)
from fpsa.attention import layer as layer_module
from fpsa.attention.layer import TAU_INIT
from fpsa.autodiff import Tensor, backward, no_grad, softplus
from fpsa.errors import ConfigError, NumericalError, ShapeError
from fpsa.solver import FpiConfig


def reference_step(z, x, w, tau, heads, use_tanh=True):
    """Plain numpy version of one refinement step, used as an oracle."""
    b, n, c = z.shape
    d = c // heads

    def split(m):
        return m.reshape(b, n, heads, d).transpose(0, 2, 1, 3)

    q, k, v = split(z @ w[:, :c]), split(z @ w[:, c : 2 * c]), split(x @ w[:, 2 * c :])
    scores = q @ k.transpose(0, 1, 3, 2) * d**-0.5 / tau[:, None, None]
    scores -= scores.max(-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(-1, keepdims=True)
    out = (p @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
    return (np.tanh(out) if use_tanh else out), p


@pytest.fixture
def layer(f64):
    return FpsaLayer(8, 2, np.random.default_rng(0))


class TestStep:
    def test_matches_reference(self, layer, rng):
        x = rng.standard_normal((2, 5, 8))
        z = rng.standard_normal((2, 5, 8))
        w = layer.qkv_weight()
        tau = np.array([0.7, 1.3])
        seen = []
        out = attention_step(Tensor(z), value_static(Tensor(x), w, 2), w, Tensor(tau), 2, on_probs=seen.append)
        ref, probs = reference_step(z, x, w.data, tau, 2)
        np.testing.assert_allclose(out.data, ref, rtol=1e-12)
        np.testing.assert_allclose(seen[0], probs, rtol=1e-12)

    def test_tanh_bounds_the_state(self, layer, rng):
        x = rng.standard_normal((1, 4, 8)) * 50
        z, _ = solve_state(x, layer, FpiConfig(20, 1e-6))
        assert np.abs(z.data).max() < 1.0

    def test_every_iterate_is_bounded(self, layer, rng):
        # moderate inputs: far enough from tanh saturation that rounding cannot reach 1.0
        x = rng.standard_normal((2, 4, 8))
        _, info = solve_state(x, layer, FpiConfig(20, 1e-9), mode="unrolled", record_iterates=True)
        for z in info.result.snapshots[1:]:
            z = z.data if isinstance(z, Tensor) else z
            assert np.abs(z).max() < 1.0

    @pytest.mark.parametrize("mode", ["implicit", "unrolled"])
    def test_parameters_are_reused_across_iterations(self, layer, rng, monkeypatch, mode):
        seen = []
        real = layer_module.attention_step

        def spy(z, v_static, w_qkv, tau, *args, **kwargs):
            seen.append((v_static, w_qkv, tau))
            return real(z, v_static, w_qkv, tau, *args, **kwargs)

        monkeypatch.setattr(layer_module, "attention_step", spy)
        solve_state(rng.standard_normal((1, 3, 8)), layer, FpiConfig(10, 1e-12), mode)
        assert len(seen) > 2
        for i in range(3):
            assert all(s[i] is seen[0][i] for s in seen)

    def test_shape_validation(self, layer):
        w = layer.qkv_weight()
        with pytest.raises(ShapeError):
            attention_step(Tensor(np.ones((4, 8))), None, w, layer.temperatures(), 2)
        with pytest.raises(ShapeError):
            attention_step(Tensor(np.ones((1, 4, 8))), Tensor(np.ones((1, 2, 3, 4))), w, layer.temperatures(), 2)

    def test_overflow_names_the_head(self):
        layer = FpsaLayer(8, 2, np.random.default_rng(0), spectral=False)
        layer.qkv.data[:, 0:4] = 1e30  # queries of head 0
        layer.qkv.data[:, 8:12] = 1e30  # keys of head 0
        with pytest.raises(NumericalError, match=r"head\(s\) \[0\]"), np.errstate(over="ignore"):
            forward(np.ones((1, 3, 8), dtype=np.float32), layer)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            FpsaLayer(10, 3, np.random.default_rng(0))

    def test_non_finite_input_rejected(self, layer):
        x = np.ones((1, 2, 8))
        x[0, 0, 0] = np.nan
        with pytest.raises(NumericalError):
            forward(x, layer)


class TestLayer:
    def test_temperature_starts_at_one(self, layer):
        assert softplus(Tensor(np.array(TAU_INIT))).item() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(layer.temperatures().data, 1.0)

    def test_forward_shapes_and_trace(self, layer, rng):
        y, trace = forward(rng.standard_normal((3, 5, 8)), layer, FpiConfig(30, 1e-5))
        assert y.shape == (3, 5, 8)
        assert trace.counts.shape == (3, 2, 5)
        assert trace.retained_iterates == 1
        np.testing.assert_allclose(y.data.mean(-1), 0.0, atol=1e-9)

    def test_all_parameters_receive_gradient(self, layer, rng):
        y, _ = forward(rng.standard_normal((2, 4, 8)), layer, FpiConfig(50, 1e-8))
        grads = backward((y * Tensor(rng.standard_normal(y.shape))).sum(), list(layer.parameters().values()))
        for name, p in layer.parameters().items():
            assert np.isfinite(grads[p]).all(), name

    def test_vanilla_matches_reference(self, rng):
        layer = FpsaLayer(8, 2, np.random.default_rng(0), use_tanh_step_norm=False, spectral=False)
        x = rng.standard_normal((2, 3, 8)).astype(np.float32)
        seen = []
        vanilla_attention(x, layer, on_probs=seen.append)
        _, probs = reference_step(x, x, layer.qkv.data, np.ones(2), 2, use_tanh=False)
        np.testing.assert_allclose(seen[0], probs, rtol=1e-5)

    def test_same_parameter_count_for_both_variants(self):
        a = FpsaLayer(16, 4, np.random.default_rng(0))
        b = FpsaLayer(16, 4, np.random.default_rng(0), use_tanh_step_norm=False, spectral=False)
        assert a.num_parameters() == b.num_parameters()

    def test_attention_maps_are_row_stochastic(self, layer, rng):
        x = rng.standard_normal((2, 6, 8))
        for fixed in (True, False):
            maps = attention_maps(x, layer, fixed_point_layer=fixed)
            assert maps.shape == (2, 2, 6, 6)
            np.testing.assert_allclose(maps.sum(-1), 1.0, atol=1e-12)

    def test_equilibrium_at_initialisation_is_token_uniform(self, layer, rng):
        # With normalised weights and bounded states the logits stay small, and the
        # token-uniform state tanh(mean V) is the attracting fixed point.
        x = rng.standard_normal((2, 5, 8))
        with no_grad():
            z, info = solve_state(x, layer, FpiConfig(200, 1e-10))
        assert info.result.converged.all()
        np.testing.assert_allclose(z.data, z.data[:, :1, :].repeat(5, axis=1), atol=1e-9)
        v = value_static(Tensor(x), layer.qkv_weight(), 2).data.mean(axis=2)
        np.testing.assert_allclose(z.data[:, 0, :], np.tanh(v.reshape(2, 8)), atol=1e-9)


class TestSpectralNorm:
    def test_power_iteration_on_diagonal(self):
        u0 = np.array([0.6, 0.8])
        _, _, sigma = power_iteration(np.diag([3.0, 1.0]), u0, 20)
        assert sigma == pytest.approx(3.0, abs=1e-3)

    def test_normalized_top_singular_value(self, rng):
        w = rng.standard_normal((6, 4)) * 3
        sn = SpectralNorm(w, rng, warmup=50)
        assert np.linalg.svd(sn(w), compute_uv=False)[0] <= 1 + 1e-3

    def test_small_matrices_pass_through(self, rng):
        w = np.diag([0.9, 0.5])
        out, _ = spectral_normalize(w, np.array([1.0, 0.0]))
        assert out is w

    def test_zero_matrix(self):
        out, _ = spectral_normalize(np.zeros((2, 2)), np.array([1.0, 0.0]))
        np.testing.assert_array_equal(out, 0.0)
        assert power_iteration(np.zeros((2, 2)), np.array([1.0, 0.0]))[2] == 0.0

    def test_call_does_not_advance_state(self, rng):
        w = rng.standard_normal((4, 12))
        sn = SpectralNorm(w, rng, warmup=1)
        u = sn.u.copy()
        sn(w)
        np.testing.assert_array_equal(sn.u, u)
        sn.step(w)
        assert not np.array_equal(sn.u, u)

    def test_gradient_through_division(self, f64, rng):
        # d/dW of sum(G * W / sigma(W)) with u, v held constant; oracle: finite differences
        w0 = rng.standard_normal((3, 5)) * 2
        g = rng.standard_normal((3, 5))
        sn = SpectralNorm(w0, rng)
        w = Tensor(w0.copy(), requires_grad=True)
        grad_w = backward((sn(w) * Tensor(g)).sum(), [w])[w]

        def f(m):
            return float((g * m / (sn.u @ m @ sn.v)).sum())

        fd = np.zeros_like(w0)
        for idx in np.ndindex(w0.shape):
            e = np.zeros_like(w0)
            e[idx] = 1e-6
            fd[idx] = (f(w0 + e) - f(w0 - e)) / 2e-6
        np.testing.assert_allclose(grad_w, fd, rtol=1e-6, atol=1e-9)
