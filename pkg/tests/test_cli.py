import csv
import json
import os
import tempfile
import time
import unittest
from pathlib import Path

import numpy as np

from layered.cli import main
from layered.errors import ConfigurationError
from layered.experiments import (CLQR_HEADER, IDENTITY_HEADER, LQR_HEADER, THETA_TRACE_HEADER, WISHART_HEADER,
                                 build_config, load_config, run_command)

SLOW = os.environ.get("LAYERED_SLOW_TESTS") == "1"

SMALL_THEORY = {
    "d_x": 1, "d_u": 1, "T": 3, "K": 20, "n_systems": 1, "identity_instances": 5,
    "wishart_trials": 2000, "eps_levels": [0.0, 0.001],
}

SMALL_TABLE = {
    "d_x": 1, "d_u": 1, "T": 2, "K": 20, "freeze": 5, "n_systems": 2, "eval_count": 5,
    "oracle_tracking": True,
}


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class TestConfig(unittest.TestCase):
    def test_precedence(self):
        config = build_config("clqr", {"B": 10, "seed": 3}, {"seed": 7, "n_systems": None})
        self.assertEqual(config.B, 10)
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.dual_kind, "mlp")
        self.assertEqual(config.constraint_bound, -0.05)
        self.assertEqual(config.n_systems, 10)

    def test_command_defaults(self):
        self.assertEqual(build_config("rho-sweep").d_x, 4)
        self.assertEqual(build_config("verify-theory").n_systems, 3)
        self.assertIsNone(build_config("lqr-table").constraint_bound)

    def test_unbounded_floor_means_unconstrained(self):
        self.assertIsNone(build_config("clqr", {"constraint_bound": float("-inf")}).constraint_bound)

    def test_invalid_values(self):
        with self.assertRaises(ConfigurationError):
            build_config("lqr-table", {"B": 0})
        with self.assertRaises(ConfigurationError):
            build_config("lqr-table", {"eta": "fast"})
        with self.assertRaises(ConfigurationError):
            build_config("dance")

    def test_load_rejects_unknown_keys(self):
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "cfg.json"
            path.write_text(json.dumps({"d_x": 2, "horizon": 5}))
            with self.assertRaises(ConfigurationError):
                load_config(path)

    def test_load_rejects_bad_json(self):
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "cfg.json"
            path.write_text("{not json")
            with self.assertRaises(ConfigurationError):
                load_config(path)
            path.write_text("[1, 2]")
            with self.assertRaises(ConfigurationError):
                load_config(path)


class TestVerifyTheory(unittest.TestCase):
    def test_writes_artifacts(self):
        with tempfile.TemporaryDirectory() as d:
            config = build_config("verify-theory", SMALL_THEORY, {"output_path": d})
            result = run_command("verify-theory", config)
            self.assertEqual(result.failures, 0)

            identities = read_rows(Path(d) / "theory_identities.csv")
            self.assertEqual(identities[0], IDENTITY_HEADER)
            self.assertEqual(len(identities), 6)
            self.assertTrue(all(row[-1] == "1" for row in identities[1:]))
            for row in identities[1:]:
                self.assertIn(float(row[5]), (0.5, 1.0, 2.0, 4.0, 8.0))
                self.assertLessEqual(float(row[9]), 1e-10)

            wishart = read_rows(Path(d) / "wishart.csv")
            self.assertEqual(wishart[0], WISHART_HEADER)
            self.assertEqual([row[:2] for row in wishart[1:]], [["1", "1"], ["2", "8"], ["4", "64"]])

            trace = read_rows(Path(d) / "theta_trace.csv")
            self.assertEqual(trace[0], THETA_TRACE_HEADER)
            # one exact and one perturbed trace of K + 1 points
            self.assertEqual(len(trace), 1 + 2 * 21)
            self.assertFalse((Path(d) / "failing_instances.json").exists())

    def test_reruns_are_byte_identical(self):
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            run_command("verify-theory", build_config("verify-theory", SMALL_THEORY, {"output_path": a}))
            run_command("verify-theory", build_config("verify-theory", SMALL_THEORY, {"output_path": b}))
            for name in ("theory_identities.csv", "wishart.csv", "theta_trace.csv"):
                self.assertEqual((Path(a) / name).read_bytes(), (Path(b) / name).read_bytes())


class TestTables(unittest.TestCase):
    def test_lqr_table_with_exact_tracking(self):
        with tempfile.TemporaryDirectory() as d:
            result = run_command("lqr-table", build_config("lqr-table", SMALL_TABLE, {"output_path": d}))
            rows = read_rows(Path(d) / "lqr_table.csv")
            self.assertEqual(rows[0], LQR_HEADER)
            self.assertEqual([row[2] for row in rows[1:]], ["0", "1"])
            self.assertTrue((Path(d) / "metrics" / "lqr_seed1.csv").exists())
            self.assertEqual(len(result.paths), 3)

    def test_clqr_table_with_exact_tracking(self):
        values = dict(SMALL_TABLE, hidden=8, B=5, n_systems=1)
        with tempfile.TemporaryDirectory() as d:
            run_command("clqr", build_config("clqr", values, {"output_path": d}))
            rows = read_rows(Path(d) / "clqr_table.csv")
            self.assertEqual(rows[0], CLQR_HEADER)
            self.assertEqual(len(rows), 2)

    def test_failed_run_flags_row_and_table_completes(self):
        with tempfile.TemporaryDirectory() as d:
            cfg = Path(d) / "cfg.json"
            # the dual map overflows after a few steps and planning rejects the non-finite prediction
            cfg.write_text(json.dumps(dict(SMALL_TABLE, eta=1e30)))
            code = main(["--quiet", "lqr-table", "-c", str(cfg), "--out-dir", d])
            rows = read_rows(Path(d) / "lqr_table.csv")
        self.assertEqual(code, 0)
        self.assertEqual(len(rows), 3)
        for row in rows[1:]:
            self.assertEqual(row[3], "nan")
            self.assertNotEqual(row[5], "nan")
            self.assertEqual(row[-1], "1")

    @unittest.skipUnless(SLOW, "set LAYERED_SLOW_TESTS=1 to run")
    def test_rho_sweep_learned(self):
        values = {"d_x": 2, "d_u": 1, "T": 5, "K": 40, "freeze": 10, "n_systems": 1, "eval_count": 10,
                  "rho_values": [1.0, 4.0]}
        with tempfile.TemporaryDirectory() as d:
            run_command("rho-sweep", build_config("rho-sweep", values, {"output_path": d}))
            rows = read_rows(Path(d) / "rho_sweep.csv")
            self.assertEqual([row[0] for row in rows[1:]], ["1", "4"])


def column(rows, index):
    return np.array([float(row[index]) for row in rows[1:]])


@unittest.skipUnless(SLOW, "set LAYERED_SLOW_TESTS=1 to run")
class TestFullSizeTables(unittest.TestCase):
    def test_lqr_table_medians_and_dual_ablation(self):
        with tempfile.TemporaryDirectory() as d:
            start = time.monotonic()
            run_command("lqr-table", build_config("lqr-table", {"n_systems": 10}, {"output_path": d}))
            elapsed = time.monotonic() - start
            rows = read_rows(Path(d) / "lqr_table.csv")
        self.assertLess(elapsed, 600.0)
        deviation = np.median(column(rows, 4))
        self.assertLessEqual(np.median(column(rows, 3)), 1.05)
        self.assertLessEqual(deviation, 0.05)
        self.assertGreaterEqual(np.median(column(rows, 6)), 2.0 * deviation)

    def test_clqr_table_medians(self):
        with tempfile.TemporaryDirectory() as d:
            run_command("clqr", build_config("clqr", {"n_systems": 10}, {"output_path": d}))
            rows = read_rows(Path(d) / "clqr_table.csv")
        violation = np.median(column(rows, 4))
        self.assertLessEqual(np.median(column(rows, 3)), 1.10)
        self.assertLessEqual(violation, 0.01)
        self.assertLessEqual(violation, np.median(column(rows, 7)))

    def test_small_penalty_costs_more(self):
        values = {"d_x": 2, "d_u": 2, "n_systems": 10, "rho_values": [0.5, 2.0, 4.0]}
        with tempfile.TemporaryDirectory() as d:
            run_command("rho-sweep", build_config("rho-sweep", values, {"output_path": d}))
            rows = read_rows(Path(d) / "rho_sweep.csv")
        rho, cost = column(rows, 0), column(rows, 4)
        small = np.median(cost[rho == 0.5])
        self.assertGreater(small, np.median(cost[rho == 2.0]))
        self.assertGreater(small, np.median(cost[rho == 4.0]))


class TestCli(unittest.TestCase):
    def test_verify_theory_exit_code(self):
        with tempfile.TemporaryDirectory() as d:
            cfg = Path(d) / "cfg.json"
            cfg.write_text(json.dumps(SMALL_THEORY))
            out = Path(d) / "out"
            code = main(["--quiet", "verify-theory", "--config", str(cfg), "--out-dir", str(out)])
            self.assertEqual(code, 0)
            self.assertTrue((out / "theta_trace.csv").exists())

    def test_log_file(self):
        with tempfile.TemporaryDirectory() as d:
            cfg = Path(d) / "cfg.json"
            cfg.write_text(json.dumps(SMALL_THEORY))
            log = Path(d) / "logs" / "layered.log"
            main(["--quiet", "--log-file", str(log), "verify-theory", "-c", str(cfg), "--out-dir", d])
            self.assertIn("Running verify-theory", log.read_text())

    def test_bad_config_exit_code(self):
        with tempfile.TemporaryDirectory() as d:
            cfg = Path(d) / "cfg.json"
            cfg.write_text(json.dumps({"colour": "blue"}))
            self.assertEqual(main(["--quiet", "lqr-table", "--config", str(cfg)]), 1)

    def test_undecodable_config_exit_code(self):
        with tempfile.TemporaryDirectory() as d:
            cfg = Path(d) / "cfg.json"
            cfg.write_bytes(b'{"d_x": "\xff\xfe"}')
            with self.assertRaises(ConfigurationError):
                load_config(cfg)
            self.assertEqual(main(["--quiet", "lqr-table", "--config", str(cfg)]), 1)

    def test_missing_config_exit_code(self):
        self.assertEqual(main(["--quiet", "lqr-table", "--config", "/nonexistent/cfg.json"]), 1)

    def test_invalid_value_exit_code(self):
        with tempfile.TemporaryDirectory() as d:
            cfg = Path(d) / "cfg.json"
            cfg.write_text(json.dumps({"K": 0}))
            self.assertEqual(main(["--quiet", "lqr-table", "--config", str(cfg), "--out-dir", d]), 1)


if __name__ == "__main__":
    unittest.main()
