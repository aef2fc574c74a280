import json
import os
import tempfile
import unittest
from unittest.mock import patch

from groupnlu.config import (
    EnvConfig,
    RunConfig,
    apply_override,
    load_run_config,
    parse_override,
    read_config_file,
    validate_run_config,
    write_resolved,
)
from groupnlu.errors import ConfigError
from groupnlu.mtl_model import ArchitectureKind
from groupnlu.presets import load_preset, preset_names


def payload(**extra):
    base = {
        "tasks": [
            {"name": "atis", "train": "atis/train.tsv", "group": "loc"},
            {"name": "snips_location", "train": "loc/train.tsv", "group": "loc"},
            {"name": "snips_music", "train": "music/train.tsv"},
        ],
        "architecture": "parallel-univ-group-task",
    }
    base.update(extra)
    return base


class RunConfigTests(unittest.TestCase):
    def test_defaults(self):
        config = validate_run_config(payload(), check_paths=False)
        self.assertEqual(config.kind, ArchitectureKind.PARALLEL_UNIV_GROUP_TASK)
        self.assertEqual(config.hidden, 128)
        self.assertEqual(config.patience, 6)
        self.assertEqual(config.max_epochs, 50)
        self.assertEqual(config.lambda_adv, 0.05)
        self.assertEqual(config.gamma_ortho, 0.01)
        self.assertEqual(config.unk_replace, 0.0)
        self.assertEqual(config.groups(), [("loc", ["atis", "snips_location"]), ("snips_music", ["snips_music"])])

    def test_field_errors_are_reported_with_locations(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_run_config(
                payload(hidden=0, architecture="diagonal", dropout=1.5, unk_replace=2.0), check_paths=False
            )
        fields = {field for field, _ in ctx.exception.problems}
        self.assertEqual(fields, {"hidden", "architecture", "dropout", "unk_replace"})

    def test_nested_task_errors(self):
        broken = payload()
        broken["tasks"][1]["format"] = "csv"
        with self.assertRaises(ConfigError) as ctx:
            validate_run_config(broken, check_paths=False)
        self.assertEqual(ctx.exception.problems[0][0], "tasks.1.format")

    def test_duplicate_task_names(self):
        dup = payload()
        dup["tasks"][2]["name"] = "atis"
        with self.assertRaises(ConfigError):
            validate_run_config(dup, check_paths=False)

    def test_missing_paths(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_run_config(payload())
        self.assertIn(("tasks.0.train", "atis/train.tsv does not exist"), ctx.exception.problems)

    def test_model_and_train_settings(self):
        config = validate_run_config(payload(seed=9, clip_norm=0, batch_size=8, unk_replace=0.1), check_paths=False)
        model = config.build_model_config()
        self.assertEqual(model.architecture, ArchitectureKind.PARALLEL_UNIV_GROUP_TASK)
        self.assertEqual(model.seed, 9)
        settings = config.build_train_settings()
        self.assertIsNone(settings.clip_norm)
        self.assertEqual(settings.batch_size, 8)
        self.assertEqual(settings.unk_replace, 0.1)


class OverrideTests(unittest.TestCase):
    def test_parse_override(self):
        self.assertEqual(parse_override("hidden=64"), ("hidden", 64))
        self.assertEqual(parse_override("output_dir=runs/x"), ("output_dir", "runs/x"))
        self.assertEqual(parse_override("freeze_word_embeddings=true"), ("freeze_word_embeddings", True))
        with self.assertRaises(ConfigError):
            parse_override("hidden")

    def test_apply_dotted_override(self):
        data = payload()
        apply_override(data, "tasks.2.group", "media")
        self.assertEqual(data["tasks"][2]["group"], "media")
        with self.assertRaises(ConfigError):
            apply_override(data, "tasks.7.group", "x")

    def test_precedence(self):
        env = EnvConfig(seed=11, data_dir="data", log_level="INFO")
        self.assertEqual(load_run_config(payload(), env=env, check_paths=False).seed, 11)
        self.assertEqual(load_run_config(payload(seed=5), env=env, check_paths=False).seed, 5)
        config = load_run_config(payload(seed=5), [("seed", 2)], env=env, check_paths=False)
        self.assertEqual(config.seed, 2)
        self.assertEqual(load_run_config(payload(), check_paths=False).seed, 0)

    def test_overrides_do_not_mutate_input(self):
        data = payload()
        load_run_config(data, [("hidden", 7)], check_paths=False)
        self.assertNotIn("hidden", data)


class EnvConfigTests(unittest.TestCase):
    def test_reads_environment(self):
        with patch.dict(os.environ, {"MTL_SEED": "42", "MTL_DATA_DIR": "/corpora", "MTL_LOG_LEVEL": "debug"}):
            env = EnvConfig.load()
        self.assertEqual(env, EnvConfig(seed=42, data_dir="/corpora", log_level="DEBUG"))

    def test_bad_seed(self):
        with patch.dict(os.environ, {"MTL_SEED": "many"}):
            with self.assertRaises(ConfigError):
                EnvConfig.load()


class FileTests(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_read_and_write_resolved(self):
        path = os.path.join(self.temp_dir.name, "run.json")
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload(), handle)
        config = validate_run_config(read_config_file(path), check_paths=False)
        resolved = write_resolved(config, os.path.join(self.temp_dir.name, "out"))
        with open(resolved, encoding="utf-8") as handle:
            again = RunConfig.model_validate(json.load(handle))
        self.assertEqual(again, config)

    def test_unreadable_config(self):
        path = os.path.join(self.temp_dir.name, "bad.json")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("{not json")
        with self.assertRaises(ConfigError):
            read_config_file(path)
        with self.assertRaises(ConfigError):
            read_config_file(os.path.join(self.temp_dir.name, "missing.json"))


class PresetTests(unittest.TestCase):
    def test_every_preset_validates(self):
        for name in preset_names():
            with self.subTest(name=name):
                config = validate_run_config(load_preset(name, "data"), check_paths=False)
                self.assertEqual(config.output_dir, os.path.join("runs", name))

    def test_four_task_grouping(self):
        config = validate_run_config(load_preset("benchmark-4task-serial-highway", "data"), check_paths=False)
        self.assertEqual(
            config.groups(),
            [("atis_location", ["atis", "snips_location"]), ("music_creative", ["snips_music", "snips_creative"])],
        )
        self.assertEqual(config.task("snips_music").train, os.path.join("data", "snips_music", "train.tsv"))

    def test_single_task_presets_drop_shared_losses(self):
        config = validate_run_config(load_preset("atis-single", "data"), check_paths=False)
        self.assertEqual((config.lambda_adv, config.gamma_ortho, config.alpha_mode), (0.0, 0.0, "uniform"))

    def test_unknown_preset(self):
        with self.assertRaises(KeyError):
            load_preset("benchmark-4task-diagonal", "data")
        with self.assertRaises(KeyError):
            load_preset("atis", "data")


if __name__ == "__main__":
    unittest.main()
