import os
import unittest
from pathlib import Path
from typing import Dict

import numpy as np
import shared
import yaml
from estimation import (
    fit_mem,
    OptimizerSpec,
)
from evtmem import (
    model_evis,
    split_half,
)
from inference import (
    gof_transform,
    lambda_b_hat,
    predict_u,
    rank_stability,
    wald_test,
)
from likelihood import (
    ExceedanceCache,
    QuadratureSpec,
)
from mc_harness import (
    experiment_from_config,
    McSummary,
    run_experiment,
)
from model_core import (
    effective_counts,
    MemParams,
)
from tail_dist import (
    simulate_dataset,
    TailFamily,
)
from threshold import CandidateLadder

SLOW = bool(os.environ.get("EVTMEM_SLOW_TESTS"))
EXPERIMENTS = Path(__file__).resolve().parent.parent.parent.joinpath("data", "experiments")
QUAD = QuadratureSpec()
OPT = OptimizerSpec(restarts=1)


def run_design(name: str, **overrides: object) -> McSummary:
    with EXPERIMENTS.joinpath(f"{name}.yml").open() as f:
        config = yaml.safe_load(f)
    config.update(overrides)
    return run_experiment(experiment_from_config(config, QUAD, OPT), shared.resolve_threads(None, {}))


def variances(summary: McSummary) -> Dict[tuple, Dict[str, float]]:
    return {
        (cell.j, cell.level): {p: stats["variance"] for p, stats in cell.statistics.items()} for cell in summary.cells
    }


@unittest.skipUnless(SLOW, "set EVTMEM_SLOW_TESTS to run the Monte Carlo checks")
class TestAsymptoticNormality(unittest.TestCase):

    def test_standardized_estimates(self) -> None:
        for name in ("design_a_20x20", "design_a_80x40"):
            for covariate_gen in ("normal01", "uniform_sqrt3"):
                summary = run_design(name, covariate_gen=covariate_gen)
                for cell in summary.cells:
                    self.assertEqual(set(cell.ks), {"beta_a_0", "beta_b_0", "sigma2"})
                    for parameter, distance in cell.ks.items():
                        self.assertLessEqual(distance, 0.08, f"{name} {covariate_gen} {parameter}")


@unittest.skipUnless(SLOW, "set EVTMEM_SLOW_TESTS to run the Monte Carlo checks")
class TestVarianceRates(unittest.TestCase):

    def test_doubling_clusters_and_exceedances(self) -> None:
        var = variances(run_design("design_a_rates"))
        for parameter in ("beta_a_0", "beta_b_0", "sigma2"):
            ratio = var[(80, 20)][parameter] / var[(40, 20)][parameter]
            self.assertAlmostEqual(ratio, 0.5, delta=0.125)
        self.assertAlmostEqual(var[(40, 40)]["beta_b_0"] / var[(40, 20)]["beta_b_0"], 0.5, delta=0.125)
        for parameter in ("beta_a_0", "sigma2"):
            self.assertAlmostEqual(var[(40, 40)][parameter] / var[(40, 20)][parameter], 1.0, delta=0.25)


@unittest.skipUnless(SLOW, "set EVTMEM_SLOW_TESTS to run the Monte Carlo checks")
class TestBiasMechanism(unittest.TestCase):

    def test_bias_grows_with_exceedance_count(self) -> None:
        bias_at_200 = {}
        for name in ("design_b", "design_c"):
            summary = run_design(name, j_grid=[100])
            bias = [abs(cell.statistics["beta_a_0"]["bias"]) for cell in summary.cells]
            self.assertEqual(bias, sorted(bias), name)
            bias_at_200[name] = bias[-1]
        pareto = run_design("design_c", family="pareto", j_grid=[100], t_grid=[200])
        stats = pareto.cells[0].statistics["beta_a_0"]
        mc_error = np.sqrt(stats["variance"] / pareto.cells[0].n_fits)
        self.assertLessEqual(abs(stats["bias"]), 2.0 * mc_error)
        self.assertGreaterEqual(bias_at_200["design_c"], abs(stats["bias"]))


@unittest.skipUnless(SLOW, "set EVTMEM_SLOW_TESTS to run the Monte Carlo checks")
class TestWaldSize(unittest.TestCase):

    def test_rejection_rate_under_null(self) -> None:
        truth = MemParams.from_sigma([-0.5], [0.0], [[0.2]])
        rejections = 0
        for r in range(500):
            data = simulate_dataset(TailFamily("pareto"), truth, "normal01", 80, 40, seed=8040, replication=r)
            plan = effective_counts(data, {c: 1.0 for c in data.cluster_ids})
            fit = fit_mem(data, plan, QUAD, OPT)
            rejections += wald_test(fit, lambda_b_hat(data, plan), plan, 0).p_value < 0.05
        self.assertTrue(0.03 <= rejections / 500 <= 0.08, rejections)


@unittest.skipUnless(SLOW, "set EVTMEM_SLOW_TESTS to run the Monte Carlo checks")
class TestGoodnessOfFit(unittest.TestCase):

    def test_pareto_data_pass(self) -> None:
        truth = MemParams.from_sigma([-0.5], [0.2], [[0.2]])
        passed = 0
        for r in range(100):
            data = simulate_dataset(TailFamily("pareto"), truth, "normal01", 40, 40, seed=77, replication=r)
            plan = effective_counts(data, {c: 1.0 for c in data.cluster_ids})
            fit = fit_mem(data, plan, QUAD, OPT)
            preds = predict_u(fit, ExceedanceCache(data, plan))
            passed += gof_transform(fit, preds, data, plan).ks_pvalue >= 0.01
        self.assertGreaterEqual(passed, 95)


@unittest.skipUnless(SLOW, "set EVTMEM_SLOW_TESTS to run the Monte Carlo checks")
class TestSplitHalfStability(unittest.TestCase):

    def test_mixed_model_is_more_stable_than_fixed_effects(self) -> None:
        truth = MemParams.from_sigma([-0.5], [0.2], [[0.3]])
        ladder = CandidateLadder(10, 100)
        wins = 0
        for r in range(50):
            data = simulate_dataset(TailFamily("burr"), truth, "normal01", 30, 400, seed=99, replication=r)
            first, second = split_half(data)
            first_evis, _ = model_evis(first, ladder, QUAD, OPT)
            second_evis, _ = model_evis(second, ladder, QUAD, OPT)
            m1 = rank_stability(first_evis["M1"], second_evis["M1"])
            m3 = rank_stability(first_evis["M3"], second_evis["M3"])
            wins += m1 >= m3
        self.assertGreaterEqual(wins, 40)


if __name__ == "__main__":
    unittest.main()
