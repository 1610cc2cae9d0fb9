import pytest

from textsr.config import PRESETS, Config, ConfigError, dump_config, load_config, parse_assignments


class TestLoadConfig:
    def test_desk_preset_without_source(self):
        config = load_config()

        assert config.base_channels == 32
        assert config.T == 100

    def test_default_preset_is_full_scale(self):
        config = load_config("default")

        assert config.base_channels == 160
        assert config.channel_mults == (1, 2, 2, 4)
        assert config.T == 1000
        assert config.steps == 200
        assert config.batch_size == 64
        assert config.lr == 1e-6
        assert config.epochs == 250

    def test_file_values_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("preset=desk\nT=40\nrg_block_ids=1,2\nschedule=cosine\n", encoding="utf-8")

        config = load_config(str(path), {"T": "60"})

        assert config.base_channels == 32
        assert config.T == 60
        assert config.rg_block_ids == frozenset({1, 2})
        assert config.schedule == "cosine"

    def test_empty_guidance_set(self):
        assert load_config(None, {"rg_block_ids": "none"}).rg_block_ids == frozenset()

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="unknown config key: bogus"):
            load_config(None, {"bogus": "1"})

    def test_invalid_value_is_named(self):
        with pytest.raises(ConfigError, match="T"):
            load_config(None, {"T": "many"})

    @pytest.mark.parametrize("overrides", [
        {"steps": "500"},
        {"sampler": "euler"},
        {"rg_block_ids": "1,5"},
        {"lambda_recog": "-1"},
        {"eta": "2"},
    ])
    def test_out_of_range_rejected(self, overrides):
        with pytest.raises(ConfigError):
            load_config(None, overrides)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(str(tmp_path / "absent.cfg"))

    def test_dump_reloads(self, tmp_path):
        config = load_config(None, {"rg_block_ids": "3,4", "alphabet": "xyz"})
        path = tmp_path / "dump.cfg"
        path.write_text(dump_config(config), encoding="utf-8")

        assert load_config(str(path)) == config


class TestAssignments:
    def test_split_on_first_equals(self):
        assert parse_assignments(["alphabet=a=b", "T=5"]) == {"alphabet": "a=b", "T": "5"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_assignments(["T"])


class TestUnetConfig:
    def test_alphabet_size_includes_blank(self):
        assert PRESETS["default"].unet_config().alphabet_size == 37

    def test_light_variant(self):
        assert Config(rg_block_ids=frozenset({1, 2})).unet_config().is_guided(3) is False
