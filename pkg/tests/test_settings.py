import pytest

from csilab.channel import derive_seed
from csilab.errors import ConfigError
from csilab.settings import (
    DEFAULT_SETTINGS,
    ExperimentConfig,
    channel_params,
    format_echo,
    load_settings,
    model_config,
    parse_breakpoints,
    parse_document,
    split_seed,
    train_config,
    with_values,
    write_echo,
)


def test_defaults_match_the_desk_run():
    settings = ExperimentConfig()
    assert settings.epochs == 150
    assert settings.split_sizes() == (2000, 500, 500)
    assert settings.temporal_padding == "causal"
    assert train_config(settings).scaled_breakpoints() == ((1, 1e-3), (101, 5e-4), (121, 1e-4))


def test_every_key_is_documented():
    for name, field in ExperimentConfig.model_fields.items():
        assert field.description, name


class TestDocuments:
    def test_comments_and_blank_lines(self):
        values = parse_document("# header\n\nepochs = 3  # short\nvariant=csinet\n")
        assert values == {"epochs": "3", "variant": "csinet"}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown setting 'epoch'"):
            parse_document("epoch = 3")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match=":1:"):
            parse_document("epochs 3", source="run.cfg")

    def test_values_are_coerced(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 12\nscale_schedule = false\nsweep_gammas = 1/4, 1/8\nsweep_alphas = 0.1,0.9\n")
        settings = load_settings(path)
        assert settings.epochs == 12
        assert settings.scale_schedule is False
        assert settings.sweep_gammas == ["1/4", "1/8"]
        assert settings.sweep_alphas == [0.1, 0.9]

    def test_invalid_value_is_a_config_error(self):
        with pytest.raises(ConfigError):
            load_settings(None, ["epochs=many"])
        with pytest.raises(ConfigError):
            load_settings(None, ["variant=transformer"])
        with pytest.raises(ConfigError):
            load_settings(None, ["lr_breakpoints=1-1e-3"])

    def test_missing_document(self, tmp_path):
        with pytest.raises(ConfigError):
            load_settings(tmp_path / "absent.cfg")

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 5\nseed = 1\nbatch_size = 7\n")
        settings = load_settings(path, ["epochs=6", "seed=2"], seed=3, out=None)
        assert (settings.batch_size, settings.epochs, settings.seed) == (7, 6, 3)
        assert settings.out == DEFAULT_SETTINGS["out"]

    def test_echo_reproduces_the_settings(self, tmp_path):
        settings = load_settings(None, ["variant=reccsinet", "sweep_seeds=0,1,2", "alpha=0.7"])
        path = write_echo(tmp_path, settings)
        assert path.read_text() == format_echo(settings)
        assert load_settings(path) == settings

    def test_frozen(self):
        with pytest.raises(ValueError):
            ExperimentConfig().epochs = 3


def test_breakpoints():
    assert parse_breakpoints("1:1e-3, 11:1e-4") == ((1, 1e-3), (11, 1e-4))
    with pytest.raises(ValueError):
        parse_breakpoints("1:fast")


class TestViews:
    def test_split_seeds_differ(self):
        settings = ExperimentConfig(seed=4)
        seeds = {split: split_seed(settings, split) for split in ("train", "val", "test")}
        assert len(set(seeds.values())) == 3
        assert seeds["train"] == derive_seed(4, 1)
        assert channel_params(settings, "val").seed == seeds["val"]

    def test_channel_checks_are_config_errors(self):
        with pytest.raises(ConfigError):
            channel_params(ExperimentConfig(n_c=64, n_sub=32))

    def test_model_view(self):
        config = model_config(with_values(ExperimentConfig(), variant="convlstm_b", gamma="0.125", n_t=8, n_c=8))
        assert config.variant == "convlstm_b"
        assert config.gamma == "1/8"
        assert config.codeword_length == 16

    def test_impossible_ratio(self):
        with pytest.raises(ConfigError):
            model_config(ExperimentConfig(n_t=2, n_c=2, gamma="1/16"))

    def test_train_view(self):
        config = train_config(load_settings(None, ["lr_breakpoints=1:1e-2,3:1e-3", "reference_epochs=4", "epochs=8"]))
        assert config.scaled_breakpoints() == ((1, 1e-2), (5, 1e-3))
