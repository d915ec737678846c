import json
import os

import pytest

from cli.config import parse_config, with_overrides
from core.errors import ConfigError


class TestParseConfig:
    def test_defaults_are_filled(self):
        config = parse_config("{}")
        resolved = config.to_dict()
        assert resolved["seed"] == 0
        assert resolved["strategy"]["kind"] == "finetune"
        assert resolved["strategy"]["capacity"] == 500
        assert resolved["eval"]["mc_samples"] == 16
        assert resolved["schedule"]["train_steps"] == 20
        assert resolved["dataset"]["split"]["test_fraction"] == 0.2

    def test_lambda_key(self):
        config = parse_config(json.dumps({"strategy": {"kind": "regularize", "p": 1, "lambda": 0.01}}))
        assert config.strategy.lam == 0.01
        assert config.strategy.to_dict()["lambda"] == 0.01

    def test_data_paths_resolve_against_config(self, tmp_path):
        (tmp_path / "data").mkdir()
        (tmp_path / "data" / "images.gz").write_bytes(b"")
        text = json.dumps({"dataset": {"source": "idx", "path": "data/images.gz"}})
        config = parse_config(text, str(tmp_path / "config.json"))
        assert config.dataset.path == os.path.join(str(tmp_path), "data/images.gz")

    def test_file_check_can_be_skipped(self, tmp_path):
        text = json.dumps({"dataset": {"source": "idx", "path": "nowhere.gz"}})
        assert parse_config(text, str(tmp_path / "c.json"), check_files=False).dataset.source == "idx"

    def test_invalid_json_reports_line(self):
        with pytest.raises(ConfigError) as info:
            parse_config('{\n  "seed": 1,\n  oops\n}', "c.json")
        assert info.value.line == 3
        assert str(info.value).startswith("c.json:3:")

    @pytest.mark.parametrize("text, key", [
        ('{\n  "seed": -1\n}', "seed"),
        ('{\n  "seed": 1,\n  "extra": 2\n}', "extra"),
        ('{\n  "strategy": {\n    "kind": "ewc"\n  }\n}', "strategy"),
        ('{\n  "dataset": {\n    "source": "parquet"\n  }\n}', "source"),
        ('{\n  "dataset": {\n    "source": "csv",\n    "path": "x.csv"\n  }\n}', "path"),
        ('{\n  "network": {\n    "activation": "gelu"\n  }\n}', "network"),
        ('{\n  "schedule": {\n    "sigma1": 1.5\n  }\n}', "schedule"),
    ])
    def test_errors_point_at_the_key(self, text, key):
        with pytest.raises(ConfigError) as info:
            parse_config(text, "c.json")
        expected = next(i for i, line in enumerate(text.splitlines(), start=1) if f'"{key}"' in line)
        assert info.value.line == expected

    def test_csv_needs_declaration(self, tmp_path):
        (tmp_path / "t.csv").write_text("a\n1\n")
        text = json.dumps({"dataset": {"source": "csv", "path": "t.csv"}})
        with pytest.raises(ConfigError):
            parse_config(text, str(tmp_path / "c.json"))


class TestOverrides:
    def test_seed_and_output(self):
        config = with_overrides(parse_config("{}"), seed=7, output_dir="elsewhere")
        assert (config.seed, config.output_dir) == (7, "elsewhere")

    def test_rejects_negative_seed(self):
        with pytest.raises(ConfigError):
            with_overrides(parse_config("{}"), seed=-3)
