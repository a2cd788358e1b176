import os
import tempfile
import unittest
from unittest.mock import patch

import yaml

from veille.config import ConfigError, apply_overrides, config_load, validate_config

FIXTURES = os.path.dirname(__file__)


class VeilleConfigTestCase(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.output_dir = os.path.join(self.temp_dir.name, "run")

    def tearDown(self):
        self.temp_dir.cleanup()

    def _create_temp_config_file(self, data):
        fd, path = tempfile.mkstemp(suffix=".yaml", dir=self.temp_dir.name)
        with os.fdopen(fd, "w") as f:
            yaml.dump(data, f)
        return path

    def _tabular_config(self, **sections):
        data = {
            "global": {"output_dir": self.output_dir, "seed": 13},
            "data": {
                "source": "tabular",
                "tabular": {
                    "path": os.path.join(FIXTURES, "roman_urdu_fixture.csv"),
                    "text_column": "comment",
                    "positive_token": "P",
                    "negative_token": "N",
                },
            },
        }
        for name, values in sections.items():
            data.setdefault(name, {}).update(values)
        return data

    def test_config_load_success_with_defaults(self):
        path = self._create_temp_config_file(self._tabular_config())
        config = config_load(path)
        self.assertEqual(config.seed, 13)
        self.assertEqual(config.output_dir, self.output_dir)
        self.assertEqual(config.model.d_model, 64)
        self.assertEqual(config.model.vocab_size, 2048)
        self.assertEqual(config.lora.rank, 8)
        self.assertEqual(config.lora.target_matrices, ("query_projection", "value_projection"))
        self.assertEqual(config.training.learning_rate, 2e-5)
        self.assertEqual(config.training.epochs, 20)
        self.assertEqual(config.training.seed, 13)
        self.assertEqual(config.pretraining.learning_rate, 1e-3)
        self.assertEqual(config.pretraining.epochs, 5)
        self.assertEqual(config.data.tabular.text_column, "comment")
        self.assertEqual(config.data.tabular.label_column, "label")
        self.assertEqual(config.data.train_fraction, 0.8)
        self.assertEqual(config.path("datasets", "train.tsv"), os.path.join(self.output_dir, "datasets", "train.tsv"))

    def test_config_load_file_not_found(self):
        with self.assertRaises(ConfigError):
            config_load(os.path.join(self.temp_dir.name, "non_existent.yaml"))

    def test_config_load_invalid_yaml(self):
        path = os.path.join(self.temp_dir.name, "invalid.yaml")
        with open(path, "w") as f:
            f.write("global: {seed: 1\n  output_dir: [")
        with self.assertRaises(ConfigError):
            config_load(path)

    def test_seed_is_mandatory(self):
        data = self._tabular_config()
        del data["global"]["seed"]
        with self.assertRaises(ConfigError) as ctx:
            validate_config(data)
        self.assertIn("global.seed", str(ctx.exception))

    def test_all_errors_are_reported_together(self):
        data = self._tabular_config(training={"epochs": 0, "learning_rate": "fast"}, lora={"rank": -1})
        with self.assertRaises(ConfigError) as ctx:
            validate_config(data)
        message = str(ctx.exception)
        self.assertTrue(message.startswith("Invalid configuration:\n - "))
        self.assertIn("training.epochs: expected int in range [1,None], got 0", message)
        self.assertIn("training.learning_rate: expected number, got str", message)
        self.assertIn("lora.rank", message)

    def test_model_constraints_surface_as_config_errors(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_config(self._tabular_config(model={"d_model": 30, "n_heads": 4}))
        self.assertIn("not divisible", str(ctx.exception))

    def test_class_weights(self):
        config = validate_config(self._tabular_config(training={"class_weights": "inverse_frequency"}))
        self.assertEqual(config.training.class_weights, "inverse_frequency")
        config = validate_config(self._tabular_config(training={"class_weights": [1, 3]}))
        self.assertEqual(config.training.class_weights, (1.0, 3.0))
        with self.assertRaises(ConfigError):
            validate_config(self._tabular_config(training={"class_weights": [1, 2, 3]}))
        with self.assertRaises(ConfigError):
            validate_config(self._tabular_config(training={"class_weights": "balanced"}))

    def test_unknown_keys_only_warn(self):
        with self.assertLogs("veille.config", level="WARNING") as logs:
            config = validate_config(self._tabular_config(training={"warmup_steps": 100}))
        self.assertEqual(config.training.epochs, 20)
        self.assertTrue(any("warmup_steps" in line for line in logs.output))

    def test_missing_dataset_path(self):
        data = self._tabular_config()
        data["data"]["tabular"]["path"] = os.path.join(self.temp_dir.name, "absent.csv")
        with self.assertRaises(ConfigError) as ctx:
            validate_config(data)
        self.assertIn("data.tabular.path", str(ctx.exception))

    def test_pan12_paths_expand_environment(self):
        data = self._tabular_config()
        data["data"] = {
            "source": "pan12",
            "pan12": {
                "train_xml": "$VEILLE_PAN12_DIR/pan12_fixture.xml",
                "train_predators": "$VEILLE_PAN12_DIR/pan12_predators_fixture.txt",
                "test_xml": "$VEILLE_PAN12_DIR/pan12_fixture.xml",
                "test_predators": "$VEILLE_PAN12_DIR/pan12_predators_fixture.txt",
            },
        }
        with patch.dict(os.environ, {"VEILLE_PAN12_DIR": FIXTURES}):
            config = validate_config(data)
        self.assertEqual(config.data.pan12.train_xml, os.path.join(os.path.abspath(FIXTURES), "pan12_fixture.xml"))
        with patch.dict(os.environ, {}, clear=True):
            with self.assertRaises(ConfigError) as ctx:
                validate_config(data)
        self.assertIn("unresolved environment variable", str(ctx.exception))

    def test_overrides_win_over_file_values(self):
        path = self._create_temp_config_file(self._tabular_config(training={"epochs": 3}))
        config = config_load(
            path,
            {"training.epochs": 7, "global.seed": 99, "data.train_fraction": 0.9, "training.batch_size": None},
        )
        self.assertEqual(config.training.epochs, 7)
        self.assertEqual(config.seed, 99)
        self.assertEqual(config.data.train_fraction, 0.9)
        self.assertEqual(config.training.batch_size, 8)

    def test_apply_overrides_does_not_mutate_and_checks_sections(self):
        raw = {"training": {"epochs": 1}}
        merged = apply_overrides(raw, {"training.epochs": 2, "pretraining.epochs": 4})
        self.assertEqual(raw, {"training": {"epochs": 1}})
        self.assertEqual(merged, {"training": {"epochs": 2}, "pretraining": {"epochs": 4}})
        with self.assertRaises(ConfigError):
            apply_overrides(raw, {"optimizer.lr": 1.0})

    def test_snapshot(self):
        config = validate_config(self._tabular_config(tokenizer={"vocab_size": 300}))
        snapshot = config.to_dict()
        self.assertEqual(sorted(snapshot), ["data", "global", "lora", "model", "pretraining", "tokenizer", "training"])
        self.assertEqual(snapshot["tokenizer"], {"vocab_size": 300})
        self.assertNotIn("vocab_size", snapshot["model"])
        self.assertEqual(snapshot["global"]["seed"], 13)
        yaml.safe_dump(snapshot)


if __name__ == "__main__":
    unittest.main()
