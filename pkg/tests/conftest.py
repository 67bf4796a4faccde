import numpy as np
import pytest

from csilab.channel import ChannelParams
from csilab.models import ModelConfig
from csilab.settings import load_settings
from csilab.tensor import parameter


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_channel():
    return ChannelParams(n_t=4, n_sub=16, n_c=4, steps=3, alpha=0.1, sigma_u=1e-3, paths=2, seed=7)


@pytest.fixture
def tiny_model_config():
    """N = 2 * 4 * 4 = 32 features, M = 8 at gamma 1/4."""

    def make(variant="convlstm_a", **overrides):
        values = dict(
            variant=variant, n_t=4, n_c=4, steps=3, gamma="1/4", hidden_channels=2, dtype="float64", seed=3
        )
        values.update(overrides)
        return ModelConfig(**values)

    return make


@pytest.fixture
def smoke_settings(tmp_path):
    def make(**values):
        overrides = [
            "n_t=4", "n_c=4", "n_sub=16", "steps=2", "gamma=1/4", "hidden_channels=2",
            "train_size=12", "val_size=4", "test_size=4", "epochs=2", "batch_size=6",
            "eval_batch_size=4", "dtype=float64", "paths=2",
        ]
        values.setdefault("out", str(tmp_path / "run"))
        return load_settings(None, overrides, **values)

    return make


@pytest.fixture
def make_param(rng):
    """Float64 leaf tensor with standard normal entries."""

    def make(*shape, name=None, scale=1.0):
        return parameter(scale * rng.standard_normal(shape), name=name, dtype=np.float64)

    return make
