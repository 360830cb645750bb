#!/usr/bin/env python3
"""
End-to-end tests for the btseg command line
"""

import json
import logging
import sys
import tempfile
import unittest
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from modules import cli
from modules.trainer import LAST_CHECKPOINT, METRICS_LOG
from utils.config import TrainConfig, config_diff

RUN = {
    "scene": {"image_size": [32, 32], "max_shift_px": 2, "seed": 3},
    "dataset": {"count": 8, "train_fraction": 0.75},
    "train": {"total_steps": 4, "effective_batch": 4, "micro_batch": 2, "warmup_steps": 1,
              "stopgrad_steps": 2, "crop_size": [32, 32], "min_rect_side": 16,
              "stage_channels": [8, 8], "decoder_hidden": 8, "checkpoint_every": 2},
    "eval": {"batch_size": 2},
}


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.config = self.tmp / "run.json"
        self.config.write_text(json.dumps(RUN), encoding="utf-8")
        self.data = self.tmp / "data"
        self.out = self.tmp / "run"

    def tearDown(self):
        logger = logging.getLogger("btseg")
        for handler in [h for h in logger.handlers if isinstance(h, logging.FileHandler)]:
            logger.removeHandler(handler)
            handler.close()
        self._tmp.cleanup()

    def run_cli(self, *args):
        return cli.main([args[0], "--config", str(self.config), *args[1:]])


class TestGenerate(CliTestCase):

    def test_writes_manifest(self):
        self.assertEqual(self.run_cli("generate", "--out", str(self.data)), 0)
        manifest = json.loads((self.data / "manifest.json").read_text())
        self.assertEqual(len(manifest["samples"]), 8)

    def test_rerun_is_identical(self):
        other = self.tmp / "again"
        self.assertEqual(self.run_cli("generate", "--out", str(self.data)), 0)
        self.assertEqual(self.run_cli("generate", "--out", str(other)), 0)
        first = json.loads((self.data / "manifest.json").read_text())
        second = json.loads((other / "manifest.json").read_text())
        self.assertEqual(first["samples"], second["samples"])

    def test_seed_flag_changes_dataset(self):
        other = self.tmp / "seeded"
        self.run_cli("generate", "--out", str(self.data))
        self.run_cli("generate", "--out", str(other), "--seed", "11")
        first = json.loads((self.data / "manifest.json").read_text())
        second = json.loads((other / "manifest.json").read_text())
        self.assertNotEqual(first["fingerprint"], second["fingerprint"])


class TestErrors(CliTestCase):

    def test_unknown_config_key_exits_2(self):
        self.config.write_text(json.dumps({"train": {"lr_encodr": 1.0}}), encoding="utf-8")
        self.assertEqual(self.run_cli("status", "--out", str(self.out)), 2)

    def test_invalid_json_exits_2(self):
        self.config.write_text("{", encoding="utf-8")
        self.assertEqual(self.run_cli("status"), 2)

    def test_size_not_fitting_encoder_stride_exits_2(self):
        bad = dict(RUN, scene=dict(RUN["scene"], image_size=[36, 36]))
        self.config.write_text(json.dumps(bad), encoding="utf-8")
        self.assertEqual(self.run_cli("generate", "--out", str(self.data)), 2)
        self.assertFalse((self.data / "manifest.json").exists())

    def test_missing_dataset_exits_3(self):
        code = self.run_cli("train", "--data", str(self.tmp / "missing"), "--out", str(self.out))
        self.assertEqual(code, 3)

    def test_resume_without_checkpoint_exits_3(self):
        self.run_cli("generate", "--out", str(self.data))
        code = self.run_cli("train", "--data", str(self.data), "--out", str(self.out), "--resume")
        self.assertEqual(code, 3)


class TestTrainAndEval(CliTestCase):

    def test_train_then_eval(self):
        self.assertEqual(self.run_cli("generate", "--out", str(self.data)), 0)
        self.assertEqual(self.run_cli("train", "--data", str(self.data), "--out", str(self.out)), 0)

        records = [json.loads(line) for line in (self.out / METRICS_LOG).read_text().splitlines()]
        self.assertEqual([r["step"] for r in records], [0, 1, 2, 3])
        self.assertTrue((self.out / LAST_CHECKPOINT).exists())
        self.assertTrue((self.out / "checkpoint_000002.pt").exists())
        summary = json.loads((self.out / "train_summary.json").read_text())
        self.assertEqual(summary["steps"], 4)
        self.assertEqual(summary["fingerprint"], records[0]["fingerprint"])
        saved = json.loads((self.out / "config.json").read_text())
        self.assertIn("host", saved)
        self.assertTrue((self.out / "run.log").exists())

        self.assertEqual(self.run_cli("eval", "--data", str(self.data), "--out", str(self.out)), 0)
        report = json.loads((self.out / "eval_target_val.json").read_text())
        self.assertEqual(report["sample_count"], 2)
        self.assertEqual(report["checkpoint_step"], 4)
        self.assertEqual(report["config_fingerprint"], summary["fingerprint"])
        self.assertTrue(0.0 <= report["mean_iou"] <= 1.0)
        self.assertTrue((self.out / "eval_target_val.txt").exists())

        self.assertEqual(self.run_cli("status", "--out", str(self.out)), 0)

    def test_reruns_write_identical_bytes(self):
        other = self.tmp / "again"
        self.assertEqual(self.run_cli("generate", "--out", str(self.data)), 0)
        for out in (self.out, other):
            self.assertEqual(self.run_cli("train", "--data", str(self.data), "--out", str(out)), 0)
            self.assertEqual(self.run_cli("eval", "--data", str(self.data), "--out", str(out)), 0)
        for name in (METRICS_LOG, "eval_target_val.json", "eval_target_val.txt"):
            self.assertEqual((self.out / name).read_bytes(), (other / name).read_bytes(), name)


class TestAblateCommand(CliTestCase):

    def test_sweep_writes_every_row(self):
        self.assertEqual(self.run_cli("generate", "--out", str(self.data)), 0)
        code = self.run_cli("ablate", "--data", str(self.data), "--out", str(self.out), "--steps", "2")
        self.assertEqual(code, 0)
        result = json.loads((self.out / "ablation.json").read_text())
        self.assertEqual(len(result["rows"]), 7)
        self.assertEqual([r["row"] for r in result["rows"]], [name for name, _ in cli.ABLATION_ROWS])
        for row in result["rows"]:
            self.assertEqual(set(row["switches"]), set(cli.SWITCHES))
            self.assertTrue(0.0 <= row["mean_iou"] <= 1.0)
        self.assertFalse(result["rows"][0]["switches"]["use_bt"])
        self.assertEqual(len((self.out / "ablation.txt").read_text().splitlines()), 8)


class TestAblation(unittest.TestCase):

    def test_rows_differ_only_in_switches(self):
        base = TrainConfig()
        rows = cli.ablation_configs(base)
        self.assertEqual(len(rows), 7)
        for _, config in rows:
            self.assertTrue(set(config_diff(base, config)) <= set(cli.SWITCHES))
        self.assertFalse(rows[0][1].use_bt)
        self.assertEqual(rows[-1][1].pooling, "segconf")

    def test_render_table(self):
        rows = [{"row": "source only", "per_class_iou": [0.5, None], "mean_iou": 0.5}]
        lines = cli.render_ablation(rows, ["road", "sky"]).splitlines()
        self.assertEqual(len(lines), 2)
        self.assertIn("50.0", lines[1])


class TestCheck(unittest.TestCase):

    def test_oracle_scope_passes(self):
        self.assertEqual(cli.main(["check", "--scope", "oracles"]), 0)


if __name__ == "__main__":
    unittest.main()
