import contextlib
import io
import json
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import numpy.testing as np_test
import pandas as pd

import experiment_runner
import run as cli
from config import load_config_dict
from errors import ConfigError
from simulation.trajectory_store import read_trajectories


def quiet(fn, *args, **kwargs):
    with contextlib.redirect_stdout(io.StringIO()) as buffer:
        result = fn(*args, **kwargs)
    return result, buffer.getvalue()


class TestSeeds(unittest.TestCase):
    def test_replication_seed(self):
        seed = experiment_runner.replication_seed(7, 500, 3)
        self.assertEqual(seed, experiment_runner.replication_seed(7, 500, 3))
        self.assertNotEqual(seed, experiment_runner.replication_seed(7, 500, 4))
        self.assertNotEqual(seed, experiment_runner.replication_seed(7, 1000, 3))
        self.assertTrue(0 <= seed < 2 ** 32)


class TestWorkers(unittest.TestCase):
    def test_worker_count_is_capped(self):
        with mock.patch("experiment_runner.PRL_THREADS", 2):
            self.assertEqual(experiment_runner.worker_count(8, 10), 2)
            self.assertEqual(experiment_runner.worker_count(None, 10), 2)
            self.assertEqual(experiment_runner.worker_count(1, 10), 1)
            self.assertEqual(experiment_runner.worker_count(8, 1), 1)
            self.assertEqual(experiment_runner.worker_count(0, 0), 1)


class TestRun(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def config(self, name, **extra):
        data = {
            "scenario": "sticky_shift",
            "policy": "mixed",
            "horizon": 2,
            "n_grid": [40, 80],
            "replications": 3,
            "base_seed": 11,
            "methods": ["mean_r", "tis", "mdp"],
            "k_folds": 2,
            "output_dir": str(Path(self.tmp.name) / name),
        }
        data.update(extra)
        return load_config_dict(data)

    def test_artifacts_and_rows(self):
        config = self.config("a")
        summary = experiment_runner.run(config, n_jobs=1)
        out = Path(config.output_dir)
        for name in ("raw.csv", "summary.csv", "timings.csv", "manifest.json"):
            self.assertTrue((out / name).exists(), name)

        raw = pd.read_csv(out / "raw.csv")
        self.assertEqual(list(raw.columns), experiment_runner.CSV_COLUMNS)
        self.assertEqual(len(raw), 2 * 3 * 3)
        self.assertTrue(raw["runtime_ms"].isna().all())
        self.assertEqual(set(raw["score_kind"]), {"baseline"})

        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["replication_tasks"], 6)
        np_test.assert_allclose(manifest["truth"], summary.truth)
        self.assertEqual(manifest["config"]["policy"], "mixed")
        self.assertIn("lambda", manifest["vmm"])

    def test_raw_csv_is_reproducible(self):
        first = self.config("first")
        second = self.config("second")
        experiment_runner.run(first, n_jobs=1)
        experiment_runner.run(second, n_jobs=2)
        self.assertEqual((Path(first.output_dir) / "raw.csv").read_bytes(),
                         (Path(second.output_dir) / "raw.csv").read_bytes())

    def test_summary_decomposition(self):
        summary = experiment_runner.run(self.config("mse"), n_jobs=1)
        for _, row in summary.table.iterrows():
            self.assertEqual(row["n_valid"], 3)
            np_test.assert_allclose(row["mse"], row["bias"] ** 2 + row["variance"], rtol=1e-10, atol=1e-12)
            self.assertLessEqual(row["mean_ci_lo"], row["mean"])
            self.assertGreaterEqual(row["sd_hi"], row["mean"])
        self.assertEqual(summary.mse("tis", 80), float(summary.row("tis", 80)["mse"]))
        with self.assertRaises(KeyError):
            summary.row("dr", 80)

    def test_summary_excludes_failed_rows(self):
        raw = pd.DataFrame({
            "method": ["dr"] * 3,
            "n": [100] * 3,
            "estimate": [1.0, np.nan, 3.0],
            "ci_lo": [0.0, np.nan, 2.5],
            "ci_hi": [2.5, np.nan, 3.5],
        })
        table = experiment_runner.summarize(raw, truth=2.0)
        row = table.iloc[0]
        self.assertEqual((row["n_valid"], row["n_excluded"]), (2, 1))
        np_test.assert_allclose([row["mean"], row["bias"], row["variance"], row["coverage"]], [2.0, 0.0, 1.0, 0.5])

    def test_proximal_scores_share_a_replication(self):
        config = self.config("dr", n_grid=[60], replications=1, methods=["dr", "is", "reg"])
        rows, timings = experiment_runner.run_replication(config, 60, 0)
        self.assertEqual([r["method"] for r in rows], ["dr", "is", "reg"])
        self.assertEqual([r["score_kind"] for r in rows], ["dr", "is", "reg"])
        self.assertEqual(len({t["runtime_ms"] for t in timings}), 1)


class TestCommands(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.config = load_config_dict({
            "scenario": "sticky_shift", "policy": "stay", "horizon": 2, "output_dir": self.tmp.name,
        })

    def test_truth_for_every_policy(self):
        values = experiment_runner.truth(self.config)
        self.assertEqual(set(values), {"stay", "shift", "mixed"})
        self.assertEqual(list(experiment_runner.truth(self.config, "shift")), ["shift"])

    def test_verify_writes_report(self):
        report = experiment_runner.verify(self.config, directions=2, policies=["stay"])
        self.assertTrue(report["passed"])
        written = json.loads((Path(self.tmp.name) / "certificates.json").read_text(encoding="utf-8"))
        self.assertEqual(written["library_version"], report["library_version"])

    def test_sample_round_trip(self):
        path = str(Path(self.tmp.name) / "logged.jsonl")
        count = experiment_runner.sample(self.config, 25, seed=3, path=path, with_hidden=True)
        self.assertEqual(count, 25)
        trajectories = read_trajectories(path)
        self.assertEqual(len(trajectories), 25)
        self.assertIsNotNone(trajectories[0].hidden)

    def test_bad_config(self):
        with self.assertRaises(ConfigError):
            load_config_dict({"n_grid": []})
        with self.assertRaises(ConfigError):
            load_config_dict({"scenario": "sticky_shift", "policy": "easy"})


class TestCli(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.common = ["--scenario", "sticky_shift", "--horizon", "2", "--out", self.tmp.name]

    def test_truth(self):
        code, output = quiet(cli.main, ["truth", *self.common, "--all"])
        self.assertEqual(code, 0)
        for name in ("stay", "shift", "mixed"):
            self.assertIn(name, output)

    def test_verify_exit_codes(self):
        code, output = quiet(cli.main, ["verify", *self.common, "--policy", "stay", "--directions", "2"])
        self.assertEqual(code, 0)
        self.assertIn("ALL CERTIFICATES PASSED", output)
        code, _ = quiet(cli.main, ["verify", *self.common, "--policy", "stay", "--directions", "2",
                                   "--corrupt-q", "0.1"])
        self.assertEqual(code, 1)

    def test_invalid_grid_is_a_usage_error(self):
        code, output = quiet(cli.main, ["run", *self.common, "--n-grid", "500,100"])
        self.assertEqual(code, 2)
        self.assertIn("n_grid", output)

    def test_scenario_switch_picks_a_valid_policy(self):
        args = cli.build_parser().parse_args(["truth", *self.common])
        self.assertEqual(cli.load_config(args).policy, "stay")


if __name__ == "__main__":
    unittest.main()
