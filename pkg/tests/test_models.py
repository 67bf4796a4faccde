import numpy as np
import pytest

from csilab.errors import ShapeError
from csilab.gradcheck import grad_check
from csilab.layers import param_count
from csilab.models import (
    PAPER_GAMMAS,
    VARIANTS,
    ModelConfig,
    build_model,
    decode,
    encode,
    forward,
    parse_gamma,
    recovery_param_count,
)
from csilab.tensor import Tensor
from csilab.training import mse_loss


@pytest.mark.parametrize("gamma,length", zip(PAPER_GAMMAS, [512, 256, 128, 64]))
def test_codeword_length_at_full_size(gamma, length):
    config = ModelConfig(n_t=32, n_c=32, gamma=gamma)
    assert config.n_features == 2048
    assert config.codeword_length == length


def test_gamma_forms_are_canonical():
    assert parse_gamma("0.25") == parse_gamma("1/4")
    assert ModelConfig(gamma=0.125).gamma == "1/8"


@pytest.mark.parametrize("gamma", ["1", "3/2", "1/3", "0"])
def test_invalid_gamma_is_rejected(gamma):
    with pytest.raises(ValueError):
        ModelConfig(n_t=4, n_c=4, gamma=gamma)


@pytest.mark.parametrize("variant", VARIANTS)
def test_shapes(rng, tiny_model_config, variant):
    config = tiny_model_config(variant)
    model, params = build_model(config)
    x = rng.random((2, 3, 4, 4, 2))
    codewords = encode(model, params, x)
    assert codewords.shape == (2, 3, config.codeword_length)
    out = decode(model, params, codewords)
    assert out.shape == x.shape
    assert np.all((out.data > 0) & (out.data < 1))
    np.testing.assert_array_equal(forward(model, params, x).data, out.data)


def test_unbatched_sample(rng, tiny_model_config):
    model, params = build_model(tiny_model_config())
    x = rng.random((3, 4, 4, 2))
    assert encode(model, params, x).shape == (3, 8)
    np.testing.assert_allclose(forward(model, params, x).data, forward(model, params, x[None]).data[0], atol=1e-14)


def test_wrong_input_shape(tiny_model_config):
    model, params = build_model(tiny_model_config())
    with pytest.raises(ShapeError):
        forward(model, params, np.zeros((1, 3, 4, 5, 2)))
    with pytest.raises(ShapeError):
        decode(model, params, np.zeros((1, 3, 7)))


@pytest.mark.parametrize("variant", VARIANTS)
def test_outputs_do_not_depend_on_future_steps(rng, tiny_model_config, variant):
    model, params = build_model(tiny_model_config(variant))
    x = rng.random((2, 3, 4, 4, 2))
    changed = x.copy()
    changed[:, 2] = rng.random((2, 4, 4, 2))
    before = forward(model, params, x).data
    after = forward(model, params, changed).data
    np.testing.assert_array_equal(before[:, :2], after[:, :2])


def test_csinet_treats_steps_independently(rng, tiny_model_config):
    model, params = build_model(tiny_model_config("csinet"))
    x = rng.random((1, 3, 4, 4, 2))
    whole = forward(model, params, x).data
    single = forward(model, params, x[:, 1:2]).data
    np.testing.assert_allclose(whole[:, 1:2], single, atol=1e-14)


def test_parameters_split_between_encoder_and_decoder(tiny_model_config):
    _, params = build_model(tiny_model_config())
    names = [name for name, _ in params.named()]
    assert all(name.split("/")[0] in ("encoder", "decoder") for name in names)
    assert len(params.named("encoder")) + len(params.named("decoder")) == len(names)
    assert any(name.startswith("encoder/compress/lstm") for name in names)
    assert any(name.startswith("decoder/recover/refine2") for name in names)


def test_initialization_is_seeded(tiny_model_config):
    _, first = build_model(tiny_model_config(seed=5))
    _, second = build_model(tiny_model_config(seed=5))
    _, other = build_model(tiny_model_config(seed=6))
    assert first.equals(second)
    assert not first.equals(other)


def test_state_arrays_round_trip(tiny_model_config, rng):
    model, params = build_model(tiny_model_config())
    forward(model, params, rng.random((2, 3, 4, 4, 2)), training=True)
    restored = build_model(tiny_model_config(seed=99))[1]
    restored.load_arrays(params.state_arrays())
    assert restored.equals(params)


def test_copy_is_independent(tiny_model_config):
    _, params = build_model(tiny_model_config())
    clone = params.copy()
    params.tensors()[0].data[...] += 1.0
    assert not clone.equals(params)


def test_module_counts_cover_every_parameter(tiny_model_config):
    for variant in VARIANTS:
        model, params = build_model(tiny_model_config(variant))
        assert sum(model.module_param_counts().values()) == param_count(params)


def test_recurrent_variants_are_larger_than_csinet(tiny_model_config):
    sizes = {v: param_count(build_model(tiny_model_config(v))[1]) for v in VARIANTS}
    assert sizes["reccsinet"] > sizes["csinet"]
    assert sizes["convlstm"] > sizes["csinet"]


def test_separable_recovery_is_smaller():
    config = ModelConfig(n_t=32, n_c=32, gamma="1/4")
    assert recovery_param_count(config, separable=True) < recovery_param_count(config, separable=False)


def test_baselines_use_per_step_kernels(tiny_model_config):
    model, _ = build_model(tiny_model_config("reccsinet"))
    kernels = {spec.kernel for _, _, _, spec in model.layers() if spec.kind in ("conv3d", "refine_block")}
    assert kernels == {(1, 3, 3)}


@pytest.mark.parametrize("variant", VARIANTS)
def test_end_to_end_gradients(rng, tiny_model_config, variant):
    model, params = build_model(tiny_model_config(variant, steps=2))
    x = Tensor(rng.random((2, 2, 4, 4, 2)))

    def loss():
        return mse_loss(model.forward(params, x, training=True), x)

    report = grad_check(loss, dict(params.named()), max_entries=2, seed=1)
    assert report.passed, report.failures[:3]


def test_decoder_parameters_do_not_touch_the_codewords(rng, tiny_model_config):
    model, params = build_model(tiny_model_config())
    x = rng.random((2, 3, 4, 4, 2))
    before = encode(model, params, x).data
    for tensor in params.tensors("decoder"):
        tensor.data[...] = 0.0
    np.testing.assert_array_equal(encode(model, params, x).data, before)


def test_encoder_parameters_do_not_touch_the_reconstruction(rng, tiny_model_config):
    model, params = build_model(tiny_model_config())
    codewords = rng.standard_normal((2, 3, 8))
    before = decode(model, params, codewords).data
    for tensor in params.tensors("encoder"):
        tensor.data[...] = 0.0
    np.testing.assert_array_equal(decode(model, params, codewords).data, before)


def test_fresh_decoder_output_is_finite_and_inside_the_unit_interval(rng, tiny_model_config):
    model, params = build_model(tiny_model_config())
    out = decode(model, params, 10.0 * rng.standard_normal((1000, 3, 8))).data
    assert np.isfinite(out).all()
    assert out.min() > 0.0 and out.max() < 1.0


@pytest.mark.parametrize("offset", [-60.0, 60.0])
def test_saturated_output_stays_strictly_inside_the_unit_interval(rng, tiny_model_config, offset):
    model, params = build_model(tiny_model_config(dtype="float32"))
    params.decoder["recover"]["out"]["bias"].data[...] = offset
    out = decode(model, params, rng.standard_normal((2, 3, 8))).data
    assert out.dtype == np.float32
    assert out.min() > 0.0 and out.max() < 1.0
