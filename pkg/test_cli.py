import json
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import pandas as pd

import cli
from src.demos import save_demonstrations
from src.errors import NumericalError
from src.planner import POSE_COLUMNS, save_waypoints
from src.utils import read_json
from test_planner import coordinated_demos, gentle_waypoints

FAST_CONFIG = {
    "env": {"horizon": 6},
    "model": {"hidden_dim": 8},
    "trainer": {"updates": 1, "horizon": 3, "epochs": 1, "demo_batch": 4, "variant": "ppo-hetero"},
    "planner": {"total_time": 2.0, "n_components": 2},
    "ablation": {"variants": ["ppo-full"], "seeds": [0], "updates": 1, "eval_seeds": 1},
    "seed": 0,
}


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.config = self.tmp / "config.json"
        self.config.write_text(json.dumps(FAST_CONFIG), encoding="utf-8")

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def run_cli(self, *argv):
        return cli.main(["--log-level", "WARNING", *argv])

    def manifest(self, out):
        return read_json(Path(out) / "manifest.json")


class TestExitCodes(CliTestCase):
    def test_usage_errors(self):
        self.assertEqual(self.run_cli(), 1)
        self.assertEqual(cli.main(["--help"]), 0)
        self.assertEqual(self.run_cli("train", "--variant", "nope"), 1)
        self.assertEqual(self.run_cli("rollout", "--checkpoint", str(self.tmp / "missing.json")), 1)
        self.assertEqual(self.run_cli("eval", "--out", str(self.tmp / "eval")), 1)

    def test_bad_config(self):
        self.config.write_text(json.dumps({"trainer": {"updates": -1}}), encoding="utf-8")
        self.assertEqual(self.run_cli("train", "--config", str(self.config), "--out", str(self.tmp / "t")), 1)

    def test_numerical_failure(self):
        waypoints = save_waypoints(gentle_waypoints(), self.tmp / "waypoints.csv")
        demos = save_demonstrations(coordinated_demos(), self.tmp / "demos.jsonl")
        with patch("cli.plan_bimanual", side_effect=NumericalError("ill-conditioned")):
            code = self.run_cli("plan", "--waypoints", str(waypoints), "--demos", str(demos),
                                "--config", str(self.config), "--out", str(self.tmp / "plan"))
        self.assertEqual(code, 2)


class TestCommands(CliTestCase):
    def test_demo_gen(self):
        out = self.tmp / "demos"
        self.assertEqual(self.run_cli("demo-gen", "--n", "1", "--config", str(self.config), "--out", str(out)), 0)
        self.assertEqual(len((out / "demos.jsonl").read_text().splitlines()), 17)
        manifest = self.manifest(out)
        self.assertEqual((manifest["command"], manifest["status"]), ("demo-gen", "ok"))
        self.assertEqual(manifest["artifacts"], ["demos.jsonl"])

    def test_plan(self):
        waypoints = save_waypoints(gentle_waypoints(), self.tmp / "waypoints.csv")
        demos = save_demonstrations(coordinated_demos(), self.tmp / "demos.jsonl")
        out = self.tmp / "plan"
        code = self.run_cli("plan", "--waypoints", str(waypoints), "--demos", str(demos), "--points", "200",
                            "--config", str(self.config), "--out", str(out))
        self.assertEqual(code, 0)
        traj = pd.read_csv(out / "trajectory.csv")
        self.assertEqual(list(traj.columns), ["t"] + POSE_COLUMNS)
        self.assertEqual(len(traj), 200)
        self.assertEqual(read_json(out / "trajectory.json")["points"], 200)
        smooth = read_json(out / "smoothness.json")
        self.assertIn("relative_pose_error_mean", smooth)
        self.assertEqual(self.manifest(out)["status"], "ok")

    def test_train_rollout_eval(self):
        train_out = self.tmp / "train"
        self.assertEqual(self.run_cli("train", "--config", str(self.config), "--out", str(train_out)), 0)
        self.assertEqual(len(pd.read_csv(train_out / "metrics.csv")), 1)
        summary = read_json(train_out / "summary.json")
        self.assertEqual((summary["variant"], summary["updates"]), ("ppo-hetero", 1))
        self.assertEqual(summary["trend"], "stable")
        self.assertIn("summary.json", self.manifest(train_out)["artifacts"])
        checkpoint = train_out / "checkpoint.json"

        rollout_out = self.tmp / "rollout"
        code = self.run_cli("rollout", "--checkpoint", str(checkpoint), "--horizon", "3", "--deterministic",
                            "--out", str(rollout_out))
        self.assertEqual(code, 0)
        periods = pd.read_csv(rollout_out / "periods.csv")
        self.assertEqual(list(periods["period"]), [1, 2])
        self.assertEqual(len(pd.read_csv(rollout_out / "trajectory.csv")), 6)
        for k in range(3):
            self.assertTrue((rollout_out / "snapshots" / f"period_{k:02d}.png").is_file())

        eval_out = self.tmp / "eval"
        code = self.run_cli("eval", "--checkpoint", str(checkpoint), "--config", str(self.config),
                            "--out", str(eval_out))
        self.assertEqual(code, 0)
        report = pd.read_csv(eval_out / "report.csv")
        self.assertEqual(list(report["variant"]), ["ppo-hetero"])
        self.assertTrue((eval_out / "report.pdf").read_bytes().startswith(b"%PDF"))
        exported = json.loads((eval_out / "report.json").read_text())
        self.assertTrue(exported["analysis"]["ordering_ok"])

    def test_ablation_then_merge_runs(self):
        ablation_out = self.tmp / "ablation"
        code = self.run_cli("eval", "--ablation", "--config", str(self.config), "--out", str(ablation_out))
        self.assertEqual(code, 0)
        report = pd.read_csv(ablation_out / "report.csv")
        self.assertEqual(list(report["variant"]), ["ppo-full", "random"])
        self.assertTrue((ablation_out / "jobs" / "ppo-full_seed0" / "row.json").is_file())

        merged_out = self.tmp / "merged"
        code = self.run_cli("eval", "--runs", str(ablation_out / "jobs"), "--out", str(merged_out))
        self.assertEqual(code, 0)
        merged = pd.read_csv(merged_out / "report.csv")
        pd.testing.assert_frame_equal(merged, report)

    def test_same_seed_same_bytes(self):
        outs = [self.tmp / "a", self.tmp / "b"]
        for out in outs:
            self.assertEqual(self.run_cli("train", "--config", str(self.config), "--out", str(out)), 0)
        for name in ("metrics.csv", "summary.json", "checkpoint.json"):
            self.assertEqual((outs[0] / name).read_bytes(), (outs[1] / name).read_bytes())
        rollouts = [self.tmp / "ra", self.tmp / "rb"]
        for out in rollouts:
            code = self.run_cli("rollout", "--checkpoint", str(outs[0] / "checkpoint.json"), "--horizon", "3",
                                "--deterministic", "--out", str(out))
            self.assertEqual(code, 0)
        self.assertEqual((rollouts[0] / "trajectory.csv").read_bytes(), (rollouts[1] / "trajectory.csv").read_bytes())

    def test_missing_runs_dir(self):
        code = self.run_cli("eval", "--runs", str(self.tmp / "empty"), "--out", str(self.tmp / "eval"))
        self.assertEqual(code, 1)


if __name__ == "__main__":
    unittest.main()
