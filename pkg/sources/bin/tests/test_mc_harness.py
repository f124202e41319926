import math
import os
import unittest

import numpy as np
import pandas as pd
from estimation import OptimizerSpec
from likelihood import QuadratureSpec
from mc_harness import (
    _moments,
    experiment_from_config,
    load_experiment,
    qq_export,
    run_experiment,
)
from model_core import (
    DataFormatError,
    EvtMemWarning,
    PreconditionError,
)

QUAD = QuadratureSpec()
OPT = OptimizerSpec(restarts=0)


def small_config(**overrides: object) -> dict:
    config = {
        "name": "tiny",
        "family": "pareto",
        "covariate_gen": "normal01",
        "beta_a": -0.5,
        "beta_b": 0.2,
        "sigma2": 0.3,
        "j_grid": [4, 6],
        "n_j0_grid": [15],
        "replications": 3,
        "seed": 5,
        "restarts": 0,
    }
    config.update(overrides)
    return config


class TestExperimentConfig(unittest.TestCase):

    def test_parse(self) -> None:
        spec = experiment_from_config(small_config(j_grid="4, 6", beta_b="0.2, -0.1"), QUAD, OPT)
        self.assertEqual(spec.j_grid, (4, 6))
        self.assertEqual(spec.cells, [(4, 15), (6, 15)])
        self.assertEqual(spec.level_name, "n_j0")
        self.assertEqual(spec.parameter_names, ["beta_a_0", "beta_b_0", "beta_b_1", "sigma2"])
        self.assertAlmostEqual(spec.truth.sigma[0, 0], 0.3, places=14)
        self.assertEqual(spec.opt.seed, 5)
        self.assertTrue(spec.standardizable)

    def test_missing_key(self) -> None:
        config = small_config()
        del config["seed"]
        with self.assertRaises(DataFormatError):
            experiment_from_config(config, QUAD, OPT)

    def test_invalid_values(self) -> None:
        for overrides in (
            {"j_grid": "four"},
            {"family": "gumbel"},
            {"covariate_gen": "lognormal"},
            {"t_grid": [20]},
            {"replications": 0},
            {"quad_mode": "simpson"},
        ):
            with self.assertRaises(DataFormatError):
                experiment_from_config(small_config(**overrides), QUAD, OPT)
        with self.assertRaises(DataFormatError):
            experiment_from_config(["not", "a", "mapping"], QUAD, OPT)  # type: ignore[arg-type]

    def test_threshold_ladder_must_fit_sample(self) -> None:
        config = small_config(t_grid=[50], n_j=40)
        del config["n_j0_grid"]
        with self.assertRaises(DataFormatError):
            experiment_from_config(config, QUAD, OPT)

    def test_threshold_ladder_needs_two_exceedances(self) -> None:
        for overrides in ({"t_grid": [1], "n_j": 40}, {"t_grid": [20], "n_j": 40, "k_min": 1}):
            config = small_config(**overrides)
            del config["n_j0_grid"]
            with self.assertRaises(DataFormatError):
                experiment_from_config(config, QUAD, OPT)

    def test_bundled_experiments(self) -> None:
        folder = os.path.join(os.path.dirname(os.path.realpath(__file__)), "..", "..", "data", "experiments")
        for name in sorted(os.listdir(folder)):
            spec = load_experiment(os.path.join(folder, name), QUAD, OPT)
            self.assertEqual(f"{spec.name}.yml", name)
        smoke = load_experiment(os.path.join(folder, "smoke.yml"), QUAD, OPT)
        self.assertEqual(smoke.j_grid, (10,))
        self.assertEqual(smoke.opt.restarts, 0)

    def test_unparsable_file(self) -> None:
        path = os.path.join(os.path.dirname(os.path.realpath(__file__)), "test-data", "broken_experiment.yml")
        with self.assertRaises(DataFormatError):
            load_experiment(path, QUAD, OPT)


class TestAggregation(unittest.TestCase):

    def test_moments(self) -> None:
        stats = _moments([1.0, 2.0, 3.0], 2.5)
        self.assertEqual(stats["mean"], 2.0)
        self.assertEqual(stats["bias"], -0.5)
        self.assertEqual(stats["bias2"], 0.25)
        self.assertAlmostEqual(stats["variance"], 2.0 / 3.0, places=15)
        self.assertAlmostEqual(stats["mse"], stats["variance"] + stats["bias2"], places=15)

    def test_single_replication(self) -> None:
        stats = _moments([1.5], 1.0)
        self.assertEqual(stats["mean"], 1.5)
        self.assertTrue(math.isnan(stats["variance"]))
        self.assertTrue(math.isnan(stats["mse"]))

    def test_qq_export(self) -> None:
        table = qq_export([0.3, -1.0, 2.0, 0.1])
        self.assertEqual(list(table["empirical"]), [-1.0, 0.1, 0.3, 2.0])
        np.testing.assert_allclose(table["theoretical"].to_numpy(), -table["theoretical"].to_numpy()[::-1], atol=1e-12)
        with self.assertRaises(PreconditionError):
            qq_export([1.0])


class TestRunExperiment(unittest.TestCase):

    def test_summary_table(self) -> None:
        spec = experiment_from_config(small_config(), QUAD, OPT)
        summary = run_experiment(spec)
        frame = summary.export_to_frame()
        self.assertEqual(list(frame.columns), ["design", "J", "n_j0", "parameter", "statistic", "value"])
        self.assertEqual(sorted(frame["J"].unique()), [4, 6])
        for cell in summary.cells:
            self.assertEqual(cell.n_fits + cell.n_failed, 3)
            self.assertEqual(set(cell.statistics), {"beta_a_0", "beta_b_0", "sigma2"})
            self.assertEqual(cell.statistics["beta_b_0"]["truth"], 0.2)
        truth_rows = frame[(frame["parameter"] == "beta_a_0") & (frame["statistic"] == "truth")]
        self.assertTrue(np.allclose(truth_rows["value"], -0.5))

    def test_deterministic_and_parallel(self) -> None:
        spec = experiment_from_config(small_config(j_grid=[4], replications=2), QUAD, OPT)
        first = run_experiment(spec).export_to_frame()
        pd.testing.assert_frame_equal(first, run_experiment(spec).export_to_frame())
        pd.testing.assert_frame_equal(first, run_experiment(spec, threads=2).export_to_frame())

    def test_threshold_ladder_cells(self) -> None:
        config = small_config(family="student_t", j_grid=[4], t_grid=[20], n_j=60, replications=1)
        del config["n_j0_grid"]
        spec = experiment_from_config(config, QUAD, OPT)
        with self.assertWarns(EvtMemWarning):
            summary = run_experiment(spec)
        frame = summary.export_to_frame()
        self.assertIn("T", frame.columns)
        self.assertTrue(frame[frame["statistic"] == "variance"]["value"].isna().all())


if __name__ == "__main__":
    unittest.main()
