import json

import pytest

from epsr.config_loader import (
    build_config, deep_merge, load_train_config, parse_override, read_config_file,
    write_effective_config,
)
from epsr.logger import ConfigurationError
from epsr.models import RunConfig, TrainConfig, weight_preset


class TestOverrides:
    def test_nested_json_value(self):
        assert parse_override("weights.lambda3=0.6") == {"weights": {"lambda3": 0.6}}

    def test_non_json_value_stays_a_string(self):
        assert parse_override("dataset_manifest=data/train.txt") == {"dataset_manifest": "data/train.txt"}

    def test_list_value(self):
        assert parse_override("generator.rgb_mean=[0.5,0.5,0.5]") == {"generator": {"rgb_mean": [0.5, 0.5, 0.5]}}

    @pytest.mark.parametrize("item", ["lambda3", "=3"])
    def test_malformed(self, item):
        with pytest.raises(ConfigurationError):
            parse_override(item)

    def test_deep_merge_keeps_siblings(self):
        base = {"weights": {"lambda1": 1.0, "lambda2": 0.05}, "seed": 1}
        merged = deep_merge(base, {"weights": {"lambda2": 0.02}})
        assert merged == {"weights": {"lambda1": 1.0, "lambda2": 0.02}, "seed": 1}
        assert base["weights"]["lambda2"] == 0.05


class TestBuildConfig:
    def test_unknown_key_names_path(self):
        with pytest.raises(ConfigurationError, match="weights.lambda4") as info:
            build_config(TrainConfig, {"weights": {"lambda4": 1.0}})
        assert info.value.field == "weights.lambda4"

    def test_invalid_value_names_field(self):
        with pytest.raises(ConfigurationError, match="batch"):
            build_config(TrainConfig, {"batch": 0})

    def test_inconsistent_geometry(self):
        with pytest.raises(ConfigurationError):
            build_config(TrainConfig, {"patch": 96})

    def test_bad_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigurationError, match="JSON object"):
            read_config_file(path)
        with pytest.raises(ConfigurationError, match="not found"):
            read_config_file(tmp_path / "missing.json")


class TestLayering:
    def test_defaults(self):
        config = load_train_config()
        assert config.weights.as_tuple() == (1.0, 0.05, 0.4)
        assert config.patch == 192
        assert config.generator.num_blocks == 32
        assert not config.desk_scale

    def test_file_then_flags(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 3, "batch": 8, "weights": {"lambda3": 0.6}}))
        config = load_train_config(path, ["batch=2", "weights.lambda2=0.0005"], seed=11)
        assert config.seed == 11
        assert config.batch == 2
        assert config.weights.as_tuple() == (1.0, 0.0005, 0.6)

    def test_base_layer_sits_below_the_file(self, tmp_path):
        base = {"weights": {"lambda1": 0.0, "lambda2": 1.0, "lambda3": 0.0}}
        assert load_train_config(base=base).weights.as_tuple() == (0.0, 1.0, 0.0)
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"weights": {"lambda3": 0.4}}))
        assert load_train_config(path, base=base).weights.as_tuple() == (0.0, 1.0, 0.4)

    def test_desk_preset(self):
        config = load_train_config(desk=True)
        assert config.desk_scale
        assert config.patch == config.discriminator.input_size == 96
        assert config.generator.num_features == 16
        assert config.beta1 == 0.9
        assert config.generator.upsample_skip
        assert config.lr == 5e-4
        assert config.lr_halve_epoch == 125

    def test_desk_flag_in_overrides(self):
        assert load_train_config(overrides=["desk_scale=true"]).generator.num_blocks == 4

    def test_region_preset_names(self):
        assert weight_preset("epsr-region2").as_tuple() == (1.0, 0.02, 0.4)
        assert weight_preset("BNet-Region3").as_tuple() == (1.0, 0.0005, 0.6)
        with pytest.raises(ValueError):
            weight_preset("epsr-region4")


class TestEffectiveConfig:
    def test_echo_round_trips(self, tmp_path):
        config = load_train_config(overrides=["weights.lambda3=0.6", "seed=5"], desk=True)
        run = RunConfig(command="train", overrides={"seed": "5"}, seed=5, out_dir=str(tmp_path))
        echoed = write_effective_config(tmp_path, config, run)
        assert load_train_config(echoed) == config
        assert json.loads((tmp_path / "run.json").read_text())["command"] == "train"
