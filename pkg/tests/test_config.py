import dataclasses

import pytest

from segvar.config import (
    ExperimentConfig,
    config_hash,
    derive_seed,
    experiment_from_dict,
    load_experiment_config,
    parse_config_text,
)
from segvar.errors import ConfigError


SAMPLE = """
# experiment settings
seed = 11
kinds = ["srsn-tumor", "mrsn"]
test_frac = 0.2
group_by_patient = true

[synth]
n_patients = 10
noise_std = 120.0

[train]
epochs = 5
learning_rate = 0.02

[clahe]
tiles_x = 4
tiles_y = 4
"""


class TestParser:
    def test_sections_and_scalars(self):
        doc = parse_config_text(SAMPLE)
        assert doc["seed"] == 11
        assert doc["kinds"] == ["srsn-tumor", "mrsn"]
        assert doc["test_frac"] == 0.2
        assert doc["group_by_patient"] is True
        assert doc["synth"]["n_patients"] == 10
        assert doc["train"]["learning_rate"] == 0.02

    def test_comments_and_blank_lines_ignored(self):
        doc = parse_config_text('a = 1  # trailing\n\n# full line\nb = "x # not a comment"\n')
        assert doc == {"a": 1, "b": "x # not a comment"}

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_config_text("a = nonsense\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("just a line\n")

    def test_unterminated_section(self):
        with pytest.raises(ConfigError):
            parse_config_text("[synth\n")


class TestExperimentConfig:
    def test_from_file(self, tmp_path):
        p = tmp_path / "exp.toml"
        p.write_text(SAMPLE)
        cfg = load_experiment_config(p)
        assert cfg.seed == 11
        assert cfg.kinds == ("srsn-tumor", "mrsn")
        assert cfg.synth.n_patients == 10
        assert cfg.train.epochs == 5
        assert cfg.clahe.tiles_x == 4

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            experiment_from_dict({"train": {"warmup": 3}})

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            experiment_from_dict({"optimizer": {"lr": 1}})

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError, match="unknown model kind"):
            experiment_from_dict({"kinds": ["mrsn", "unet"]})

    def test_even_training_sets_rejected(self):
        with pytest.raises(ConfigError, match="odd"):
            experiment_from_dict({"n_training_sets": 4})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_experiment_config(tmp_path / "nope.toml")


class TestSeedsAndHash:
    def test_derive_seed_stable_and_distinct(self):
        a = derive_seed(7, "synth")
        assert a == derive_seed(7, "synth")
        assert a != derive_seed(7, "holdout")
        assert a != derive_seed(8, "synth")
        assert 0 <= a < 2**63

    def test_hash_ignores_out_dir_and_jobs(self):
        cfg = ExperimentConfig(seed=3)
        moved = dataclasses.replace(cfg, out_dir="/elsewhere", jobs=8)
        assert config_hash(cfg) == config_hash(moved)

    def test_hash_sensitive_to_seed_and_params(self):
        cfg = ExperimentConfig(seed=3)
        assert config_hash(cfg) != config_hash(dataclasses.replace(cfg, seed=4))
        assert config_hash(cfg) != config_hash(
            dataclasses.replace(cfg, test_frac=0.25)
        )
