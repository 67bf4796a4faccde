from fractions import Fraction

import numpy as np
import pytest

from csilab.errors import ShapeError
from csilab.gradcheck import grad_check
from csilab.layers import (
    LayerSpec,
    RecurrentState,
    activation,
    apply_conv,
    batchnorm,
    children,
    convlstm_step,
    dense,
    init_buffers,
    init_params,
    lstm_step,
    p3d_block,
    p3d_spatial,
    p3d_temporal,
    param_count,
    refine_block,
    zero_state,
)
from csilab.models import flatten
from csilab.tensor import Tensor, mul, sum_all


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def weighted_sum(y, weights):
    return sum_all(mul(y, Tensor(weights)))


def lstm_loops(x, h, c, wx, wh, b):
    """Scalar-loop LSTM step; gates ordered input, forget, candidate, output."""
    batch, hidden = h.shape
    h_new, c_new = np.zeros_like(h), np.zeros_like(c)
    for n in range(batch):
        for u in range(hidden):
            z = [b[k * hidden + u] for k in range(4)]
            for k in range(4):
                for d in range(x.shape[1]):
                    z[k] += x[n, d] * wx[d, k * hidden + u]
                for d in range(hidden):
                    z[k] += h[n, d] * wh[d, k * hidden + u]
            i, f, g, o = sigmoid(z[0]), sigmoid(z[1]), np.tanh(z[2]), sigmoid(z[3])
            c_new[n, u] = f * c[n, u] + i * g
            h_new[n, u] = o * np.tanh(c_new[n, u])
    return h_new, c_new


def conv2d_loops(x, kernel):
    batch, height, width, _ = x.shape
    kh, kw, c_in, c_out = kernel.shape
    out = np.zeros((batch, height, width, c_out))
    for n in range(batch):
        for r in range(height):
            for s in range(width):
                for i in range(kh):
                    for j in range(kw):
                        rr, ss = r + i - kh // 2, s + j - kw // 2
                        if 0 <= rr < height and 0 <= ss < width:
                            out[n, r, s] += x[n, rr, ss] @ kernel[i, j]
    return out


def tree_params(spec, seed=0):
    return init_params(spec, np.random.default_rng(seed), np.float64)


def test_dense_shape_check(rng):
    spec = LayerSpec(kind="dense", in_channels=4, out_channels=3)
    params = tree_params(spec)
    assert dense(spec, params, Tensor(rng.standard_normal((5, 4)))).shape == (5, 3)
    with pytest.raises(ShapeError):
        dense(spec, params, Tensor(rng.standard_normal((5, 3))))


def test_lstm_step_matches_loops(rng):
    spec = LayerSpec(kind="lstm", in_channels=5, hidden=3)
    params = tree_params(spec)
    x = rng.standard_normal((2, 5))
    h, c = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    out, state = lstm_step(spec, params, Tensor(x), RecurrentState(Tensor(h), Tensor(c)))
    h_ref, c_ref = lstm_loops(
        x, h, c, params["input_kernel"].data, params["recurrent_kernel"].data, params["bias"].data
    )
    assert np.max(np.abs(out.data - h_ref)) <= 1e-12
    assert np.max(np.abs(state.c.data - c_ref)) <= 1e-12


def test_lstm_forget_bias_starts_at_one():
    spec = LayerSpec(kind="lstm", in_channels=2, hidden=3)
    bias = tree_params(spec)["bias"].data
    np.testing.assert_array_equal(bias, [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])


def test_lstm_state_shape_mismatch():
    spec = LayerSpec(kind="lstm", in_channels=2, hidden=3)
    with pytest.raises(ShapeError):
        lstm_step(spec, tree_params(spec), Tensor(np.zeros((1, 2))), zero_state(spec, 2))


def test_convlstm_step_matches_loops(rng):
    spec = LayerSpec(kind="convlstm", in_channels=2, hidden=2, kernel=(1, 3, 3))
    params = tree_params(spec)
    x = rng.standard_normal((2, 4, 3, 2))
    h, c = rng.standard_normal((2, 4, 3, 2)), rng.standard_normal((2, 4, 3, 2))
    out, state = convlstm_step(spec, params, Tensor(x), RecurrentState(Tensor(h), Tensor(c)))

    z = conv2d_loops(x, params["input_kernel"].data) + conv2d_loops(h, params["recurrent_kernel"].data)
    z = z + params["bias"].data
    i, f, g, o = (z[..., k * 2 : (k + 1) * 2] for k in range(4))
    c_ref = sigmoid(f) * c + sigmoid(i) * np.tanh(g)
    h_ref = sigmoid(o) * np.tanh(c_ref)
    assert np.max(np.abs(state.c.data - c_ref)) <= 1e-12
    assert np.max(np.abs(out.data - h_ref)) <= 1e-12


def test_convlstm_accepts_unbatched_input(rng):
    spec = LayerSpec(kind="convlstm", in_channels=2, hidden=2, kernel=(1, 3, 3))
    params = tree_params(spec)
    x = rng.standard_normal((4, 4, 2))
    state = zero_state(spec, 1, (4, 4), np.float64)
    unbatched = RecurrentState(Tensor(state.h.data[0]), Tensor(state.c.data[0]))
    h, _ = convlstm_step(spec, params, Tensor(x), unbatched)
    h_batched, _ = convlstm_step(spec, params, Tensor(x[None]), state)
    np.testing.assert_allclose(h.data, h_batched.data[0], atol=1e-14)


class TestParameterCounts:
    @pytest.mark.parametrize("c_in,c_out", [(2, 8), (8, 16), (16, 2)])
    def test_separable_is_smaller(self, c_in, c_out):
        ds = LayerSpec(kind="dsconv3d", in_channels=c_in, out_channels=c_out)
        full = LayerSpec(kind="conv3d", in_channels=c_in, out_channels=c_out)
        assert param_count(ds) < param_count(full)

    @pytest.mark.parametrize("m,n", [(2, 8), (8, 16), (16, 2)])
    def test_bias_free_ratio(self, m, n):
        ds = LayerSpec(kind="dsconv3d", in_channels=m, out_channels=n)
        full = LayerSpec(kind="conv3d", in_channels=m, out_channels=n)
        ratio = Fraction(param_count(ds, biases=False), param_count(full, biases=False))
        assert ratio == Fraction(m * 27 + m * n, m * 27 * n)

    def test_counts_from_tree_and_spec_agree(self):
        spec = LayerSpec(kind="refine_block", in_channels=2, out_channels=2)
        assert param_count(spec) == param_count(tree_params(spec))


class TestGradients:
    def check(self, spec, loss_of, x, **kwargs):
        params = tree_params(spec, seed=1)
        named = dict(flatten(params))
        named["x"] = x
        report = grad_check(lambda: loss_of(params), named, **kwargs)
        assert report.passed, report.failures[:3]
        return report

    def test_dense(self, make_param, rng):
        spec = LayerSpec(kind="dense", in_channels=4, out_channels=3)
        x, w = make_param(2, 4), rng.standard_normal((2, 3))
        self.check(spec, lambda p: weighted_sum(dense(spec, p, x), w), x)

    @pytest.mark.parametrize("kind", ["conv3d", "dsconv3d"])
    def test_convolutions(self, make_param, rng, kind):
        spec = LayerSpec(kind=kind, in_channels=2, out_channels=3, temporal_padding="causal")
        x, w = make_param(1, 3, 3, 3, 2), rng.standard_normal((1, 3, 3, 3, 3))
        self.check(spec, lambda p: weighted_sum(apply_conv(spec, p, x), w), x)

    def test_batchnorm(self, make_param, rng):
        spec = LayerSpec(kind="batchnorm", in_channels=2, out_channels=2)
        buffers = init_buffers(spec)
        x, w = make_param(4, 3, 2), rng.standard_normal((4, 3, 2))
        self.check(spec, lambda p: weighted_sum(batchnorm(spec, p, dict(buffers), x, True), w), x)

    def test_lstm_step(self, make_param, rng):
        spec = LayerSpec(kind="lstm", in_channels=3, hidden=2)
        x, h, c = make_param(2, 3), make_param(2, 2), make_param(2, 2)
        w = rng.standard_normal((2, 2))

        def loss(p):
            out, state = lstm_step(spec, p, x, RecurrentState(h, c))
            return sum_all(mul(out, Tensor(w))) + sum_all(mul(state.c, Tensor(w)))

        self.check(spec, loss, x)

    def test_convlstm_step(self, make_param, rng):
        spec = LayerSpec(kind="convlstm", in_channels=2, hidden=2, kernel=(1, 3, 3))
        x, h, c = make_param(1, 3, 3, 2), make_param(1, 3, 3, 2), make_param(1, 3, 3, 2)
        w = rng.standard_normal((1, 3, 3, 2))

        def loss(p):
            out, state = convlstm_step(spec, p, x, RecurrentState(h, c))
            return sum_all(mul(out, Tensor(w))) + sum_all(mul(state.c, Tensor(w)))

        self.check(spec, loss, x)

    @pytest.mark.parametrize("variant", ["A", "B", "C"])
    def test_p3d(self, make_param, rng, variant):
        spec = LayerSpec(kind=f"p3d_{variant.lower()}", in_channels=2, out_channels=2)
        buffers = init_buffers(spec)
        x, w = make_param(2, 3, 3, 3, 2), rng.standard_normal((2, 3, 3, 3, 2))
        self.check(spec, lambda p: weighted_sum(p3d_block(variant, spec, p, buffers, x, True), w), x)

    @pytest.mark.parametrize("separable", [True, False])
    def test_refine_block(self, make_param, rng, separable):
        spec = LayerSpec(kind="refine_block", in_channels=2, out_channels=2, separable=separable)
        buffers = init_buffers(spec)
        x, w = make_param(2, 2, 3, 3, 2), rng.standard_normal((2, 2, 3, 3, 2))
        self.check(
            spec, lambda p: weighted_sum(refine_block(spec, p, buffers, x, True), w), x, max_entries=12
        )


@pytest.mark.parametrize("variant", ["A", "B", "C"])
def test_p3d_preserves_shape_and_rejects_wrong_channels(rng, variant):
    spec = LayerSpec(kind=f"p3d_{variant.lower()}", in_channels=2, out_channels=2)
    params, buffers = tree_params(spec), init_buffers(spec)
    x = Tensor(rng.standard_normal((1, 3, 4, 4, 2)))
    assert p3d_block(variant, spec, params, buffers, x, True).shape == x.shape
    with pytest.raises(ShapeError):
        p3d_block(variant, spec, params, buffers, Tensor(np.zeros((1, 3, 4, 4, 3))), True)


@pytest.mark.parametrize("variant", ["A", "B", "C"])
def test_p3d_with_zero_filters_is_identity(rng, variant):
    spec = LayerSpec(kind=f"p3d_{variant.lower()}", in_channels=2, out_channels=2)
    params, buffers = tree_params(spec), init_buffers(spec)
    for name in ("spatial", "temporal"):
        params[name]["kernel"].data[...] = 0.0
        params[name]["bias"].data[...] = 0.0
    x = Tensor(rng.standard_normal((1, 3, 4, 4, 2)))
    np.testing.assert_array_equal(p3d_block(variant, spec, params, buffers, x, True).data, x.data)


def test_p3d_variant_a_with_delta_filters_doubles_the_input(rng):
    spec = LayerSpec(kind="p3d_a", in_channels=2, out_channels=2, slope=1.0)
    params, buffers = tree_params(spec), init_buffers(spec)
    params["spatial"]["kernel"].data[...] = 0.0
    params["spatial"]["kernel"].data[0, 1, 1] = np.eye(2)
    params["temporal"]["kernel"].data[...] = 0.0
    params["temporal"]["kernel"].data[1, 0, 0] = np.eye(2)
    x = Tensor(rng.standard_normal((2, 3, 4, 4, 2)))
    # inference batch norm with unit running variance only rescales by 1 / sqrt(1 + epsilon)
    out = p3d_block("A", spec, params, buffers, x, False).data
    np.testing.assert_allclose(out, 2.0 * x.data, rtol=1e-4, atol=1e-6)


def test_p3d_variant_c_wiring(rng):
    spec = LayerSpec(kind="p3d_c", in_channels=2, out_channels=2)
    params, buffers = tree_params(spec, seed=2), init_buffers(spec)
    x = Tensor(rng.standard_normal((2, 3, 4, 4, 2)))
    spatial = p3d_spatial(spec, params, buffers, x)
    expected = x.data + spatial.data + p3d_temporal(spec, params, buffers, spatial).data
    np.testing.assert_allclose(p3d_block("C", spec, params, buffers, x).data, expected, atol=1e-12)


@pytest.mark.parametrize("separable", [True, False])
def test_refine_block_wiring(rng, separable):
    spec = LayerSpec(kind="refine_block", in_channels=2, out_channels=2, separable=separable)
    params = tree_params(spec, seed=3)
    x = Tensor(rng.standard_normal((2, 3, 4, 4, 2)))
    sub, buffers = children(spec), init_buffers(spec)
    y = x
    for n in (1, 2, 3):
        y = apply_conv(sub[f"conv{n}"], params[f"conv{n}"], y)
        y = batchnorm(sub[f"bn{n}"], params[f"bn{n}"], buffers[f"bn{n}"], y, True)
        if n < 3:
            y = activation(spec, y)
    out = refine_block(spec, params, init_buffers(spec), x, True)
    np.testing.assert_allclose(out.data, x.data + y.data, atol=1e-12)


def test_refine_block_skip_with_zero_last_stage(rng):
    spec = LayerSpec(kind="refine_block", in_channels=2, out_channels=2)
    params, buffers = tree_params(spec), init_buffers(spec)
    params["bn3"]["gamma"].data[...] = 0.0
    x = Tensor(rng.standard_normal((2, 3, 4, 4, 2)))
    np.testing.assert_allclose(refine_block(spec, params, buffers, x, True).data, x.data, atol=1e-12)
