#!/usr/bin/env python

import argparse
import sys
import warnings
from dataclasses import (
    dataclass,
    field,
)
from pathlib import Path
from typing import (
    Dict,
    List,
    Optional,
    Tuple,
)

import numpy as np
import pandas as pd
import shared
from estimation import (
    fit_fixed,
    fit_m2,
    fit_mem,
    FitResult,
    hill_fit,
    OptimizerSpec,
)
from inference import (
    cluster_evi,
    confidence_intervals,
    gof_transform,
    lambda_b_hat,
    predict_u,
    rank_stability,
    wald_table,
)
from likelihood import (
    ExceedanceCache,
    QuadratureSpec,
)
from mc_harness import (
    load_experiment,
    run_experiment,
)
from model_core import (
    ClusteredDataset,
    DataFormatError,
    effective_counts,
    MemParams,
    PreconditionError,
    ThresholdPlan,
)
from threshold import (
    CandidateLadder,
    select_thresholds,
    threshold_diagnostics,
)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_PRECONDITION = 3
EXIT_NOT_CONVERGED = 4

ROLE_A = "roleA:"
ROLE_B = "roleB:"
MODELS = ("M1", "M2", "M3", "M4")

project_path = Path(__file__).resolve().parent.parent
conf_path = project_path.joinpath("data", "conf.yml")
configs = shared.load_config(conf_path)


@dataclass
class InputTable:
    """
    Valid rows of an input CSV with the covariate names per role
    """

    frame: pd.DataFrame
    a_cols: List[str]
    b_cols: List[str]
    rejected_lines: List[int] = field(default_factory=list)
    scaling: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def roles(self) -> Dict[str, List[str]]:
        return {"A": list(self.a_cols), "B": list(self.b_cols)}

    def dataset(self) -> ClusteredDataset:
        return ClusteredDataset.from_frame(self.frame, "cluster", "y", self.a_cols, self.b_cols, intercept=True)

    def standardize(self, scaling: Optional[Dict[str, Dict[str, float]]] = None) -> None:
        """
        Center and scale every covariate to zero mean and unit unbiased variance,
        or apply previously recorded factors

        :param scaling: mean and sd per covariate from an earlier fit
        """
        columns = self.a_cols + self.b_cols
        if scaling is None:
            scaling = {}
            for name in columns:
                sd = float(self.frame[name].std(ddof=1)) if len(self.frame) > 1 else 0.0
                if not sd > 0:
                    raise PreconditionError(f"covariate {name} is constant and cannot be standardized")
                scaling[name] = {"mean": float(self.frame[name].mean()), "sd": sd}
        for name in columns:
            if name not in scaling:
                raise PreconditionError(f"no recorded scaling for covariate {name}")
            self.frame[name] = (self.frame[name] - scaling[name]["mean"]) / scaling[name]["sd"]
        self.scaling = scaling


def read_input_table(input_fp: str) -> InputTable:
    """
    Read a CSV with header cluster,y,roleA:<name>...,roleB:<name>...
    Rows with a nonpositive response or a non-numeric cell are dropped and their line numbers kept.

    :param input_fp: path to the CSV
    """
    try:
        raw = pd.read_csv(input_fp, dtype=str, keep_default_na=False, skip_blank_lines=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataFormatError(f"{input_fp} is empty") from None
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataFormatError(f"cannot parse {input_fp}: {e}") from None
    header = [c.strip() for c in raw.columns]
    raw.columns = header
    if "cluster" not in header or "y" not in header:
        raise DataFormatError("the header must contain the columns cluster and y")
    a_cols, b_cols = [], []
    for column in header:
        if column in ("cluster", "y"):
            continue
        if column.startswith(ROLE_A) and column[len(ROLE_A) :]:
            a_cols.append(column[len(ROLE_A) :])
        elif column.startswith(ROLE_B) and column[len(ROLE_B) :]:
            b_cols.append(column[len(ROLE_B) :])
        else:
            raise DataFormatError(f"column {column} must be cluster, y, {ROLE_A}<name> or {ROLE_B}<name>")
    names = a_cols + b_cols
    if len(set(names)) != len(names) or {"cluster", "y"} & set(names):
        raise DataFormatError("covariate names must be unique")
    raw = raw.fillna("")
    # header is line 1
    line = np.arange(len(raw)) + 2
    blank = np.all([raw[c].str.strip().to_numpy() == "" for c in header], axis=0)
    raw, line = raw[~blank].reset_index(drop=True), line[~blank]
    frame = pd.DataFrame({"cluster": raw["cluster"].str.strip()})
    frame["y"] = pd.to_numeric(raw["y"].str.strip(), errors="coerce")
    for name in a_cols:
        frame[name] = pd.to_numeric(raw[ROLE_A + name].str.strip(), errors="coerce")
    for name in b_cols:
        frame[name] = pd.to_numeric(raw[ROLE_B + name].str.strip(), errors="coerce")
    numeric = frame[["y"] + names].to_numpy(dtype=float)
    valid = np.all(np.isfinite(numeric), axis=1) & (numeric[:, 0] > 0) & (frame["cluster"].to_numpy() != "")
    rejected = [int(i) for i in line[~valid]]
    frame = frame[valid].reset_index(drop=True)
    if frame.empty:
        raise DataFormatError(f"{input_fp} has no valid row")
    return InputTable(frame, a_cols, b_cols, rejected)


def report_rejections(table: InputTable) -> None:
    if table.rejected_lines:
        lines = ", ".join(str(i) for i in table.rejected_lines)
        print(f"warning: {len(table.rejected_lines)} row(s) rejected at line(s) {lines}", file=sys.stderr)


def quadrature_from_args(args: argparse.Namespace) -> QuadratureSpec:
    conf = configs.get("quadrature", {})
    return QuadratureSpec(
        mode=args.quad_mode or conf.get("mode", "agh"),
        nodes_per_dim=args.nodes or int(conf.get("nodes_per_dim", 15)),
        grid_halfwidth_sd=float(conf.get("grid_halfwidth_sd", 10.0)),
        grid_points=int(conf.get("grid_points", 100001)),
    )


def optimizer_from_args(args: argparse.Namespace) -> OptimizerSpec:
    conf = configs.get("optimizer", {})
    return OptimizerSpec(
        method=conf.get("method", "nelder-mead"),
        max_iters=int(conf.get("max_iters", 2000)),
        f_tol=float(conf.get("f_tol", 1e-9)),
        x_tol=float(conf.get("x_tol", 1e-8)),
        restarts=args.restarts if args.restarts is not None else int(conf.get("restarts", 2)),
        simplex_scale=float(conf.get("simplex_scale", 0.1)),
        sigma_floor=float(configs.get("sigma_floor", 1e-8)),
        seed=args.seed,
    )


def ladder_from_args(args: argparse.Namespace) -> CandidateLadder:
    conf = configs.get("ladder", {})
    return CandidateLadder(
        k_min=args.k_min or int(conf.get("k_min", 10)),
        k_max=args.k_max or int(conf.get("k_max", 200)),
        step=args.k_step or int(conf.get("step", 1)),
    )


def build_report(fit: FitResult, table: InputTable, ladder: CandidateLadder, data: ClusteredDataset) -> Dict:
    """
    Fit report: estimates, thresholds, convergence and the layout needed to reuse the fit
    """
    return {
        "params": {
            "beta_a": fit.params.beta_a,
            "beta_b": fit.params.beta_b,
            "a_columns": ["(intercept)"] + table.a_cols,
            "b_columns": table.b_cols,
            "ladder": {"k_min": ladder.k_min, "k_max": ladder.k_max, "step": ladder.step},
            "quadrature": fit.quad.export_to_dict(),
            "iterations": fit.iterations,
            "init_loglik": fit.init_loglik,
        },
        "sigma": fit.params.sigma,
        "loglik": fit.loglik,
        "thresholds": fit.threshold_plan.omega,
        "n_j0": fit.threshold_plan.n_j0,
        "n_0": fit.threshold_plan.n_0,
        "converged": fit.converged,
        "boundary_sigma": fit.boundary_sigma,
        "schema_hash": shared.schema_hash(table.roles, data.cluster_ids),
        "scaling": table.scaling,
    }


def load_fitted(report_fp: str, input_fp: str) -> Tuple[Dict, InputTable, ClusteredDataset, ThresholdPlan, FitResult]:
    """
    Read a fit report with its data, check that they belong together and rebuild the fit
    """
    try:
        report = shared.load_json(report_fp)
        params_part = report["params"]
        table = read_input_table(input_fp)
        report_rejections(table)
        if report["scaling"]:
            table.standardize(report["scaling"])
        data = table.dataset()
        if shared.schema_hash(table.roles, data.cluster_ids) != report["schema_hash"]:
            raise PreconditionError(f"{input_fp} does not match the schema of the fit report {report_fp}")
        plan = effective_counts(data, report["thresholds"])
        params = MemParams.from_sigma(params_part["beta_a"], params_part["beta_b"], np.array(report["sigma"]))
        fit = FitResult(
            params,
            float(report["loglik"]),
            bool(report["converged"]),
            int(params_part.get("iterations", 0)),
            plan,
            QuadratureSpec(**params_part["quadrature"]),
            bool(report["boundary_sigma"]),
            init_loglik=float(params_part.get("init_loglik", float("nan"))),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, (PreconditionError, DataFormatError)):
            raise
        raise DataFormatError(f"malformed fit report {report_fp}: {e}") from None
    return report, table, data, plan, fit


def prepare_table(args: argparse.Namespace) -> Tuple[InputTable, ClusteredDataset]:
    table = read_input_table(args.input)
    report_rejections(table)
    if getattr(args, "standardize", False):
        table.standardize()
    return table, table.dataset()


def cmd_fit(args: argparse.Namespace) -> int:
    table, data = prepare_table(args)
    quad = quadrature_from_args(args)
    quad.check_dimension(data.p_a)
    ladder = ladder_from_args(args)
    plan = select_thresholds(data, ladder)
    fit = fit_mem(data, plan, quad, optimizer_from_args(args))
    shared.export_to_json(build_report(fit, table, ladder, data), args.output)
    print(args.output)
    if not fit.converged:
        print("error: the optimizer did not converge, the report holds the best point found", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    _, _, data, plan, fit = load_fitted(args.report, args.input)
    preds = predict_u(fit, ExceedanceCache(data, plan))
    shared.export_to_csv(preds.export_to_frame(), args.output)
    print(args.output)
    return EXIT_OK


def cmd_test(args: argparse.Namespace) -> int:
    report, _, data, plan, fit = load_fitted(args.report, args.input)
    estimate = lambda_b_hat(data, plan)
    shared.export_to_csv(wald_table(fit, estimate, plan, report["params"]["b_columns"]), args.output)
    print(args.output)
    return EXIT_OK


def cmd_evi(args: argparse.Namespace) -> int:
    _, _, data, plan, fit = load_fitted(args.report, args.input)
    preds = predict_u(fit, ExceedanceCache(data, plan))
    gamma = cluster_evi(fit, preds, data, plan)
    df = pd.DataFrame(
        {"cluster": list(gamma), "gamma_star": list(gamma.values()), "n_j0": [plan.n_j0[c] for c in gamma]}
    )
    df = df.sort_values("gamma_star", ascending=False, kind="mergesort").reset_index(drop=True)
    df["rank"] = np.arange(1, len(df) + 1)
    shared.export_to_csv(df, args.output)
    print(args.output)
    return EXIT_OK


def cmd_gof(args: argparse.Namespace) -> int:
    _, _, data, plan, fit = load_fitted(args.report, args.input)
    preds = predict_u(fit, ExceedanceCache(data, plan))
    result = gof_transform(fit, preds, data, plan)
    n = result.s_values.size
    qq = pd.DataFrame(
        {
            "rank": np.arange(1, n + 1),
            "s_value": result.s_values,
            "uniform_quantile": (np.arange(1, n + 1) - 0.5) / n,
        }
    )
    shared.export_to_csv(qq, args.qq)
    shared.export_to_json(
        {"ks_statistic": result.ks_statistic, "ks_pvalue": result.ks_pvalue, "n": n, "qq_table": args.qq},
        args.output,
    )
    print(args.output)
    return EXIT_OK


def cmd_intervals(args: argparse.Namespace) -> int:
    report, _, data, plan, fit = load_fitted(args.report, args.input)
    estimate = lambda_b_hat(data, plan) if data.p_b else None
    df = confidence_intervals(
        fit, estimate, args.level, report["params"]["a_columns"], report["params"]["b_columns"]
    )
    shared.export_to_csv(df, args.output)
    print(args.output)
    return EXIT_OK


def cmd_select_thresholds(args: argparse.Namespace) -> int:
    _, data = prepare_table(args)
    ladder = ladder_from_args(args)
    if args.diagnostics:
        shared.export_to_csv(threshold_diagnostics(data, ladder), args.diagnostics)
    plan = select_thresholds(data, ladder)
    shared.export_to_json(plan.export_to_dict(), args.output)
    print(args.output)
    return EXIT_OK


def split_half(data: ClusteredDataset) -> Tuple[ClusteredDataset, ClusteredDataset]:
    """
    Alternate the rows of every cluster between two halves
    """
    return data.split({c.cluster_id: np.arange(c.n) % 2 == 0 for c in data})


def model_evis(
    data: ClusteredDataset, ladder: CandidateLadder, quad: QuadratureSpec, opt: OptimizerSpec
) -> Tuple[Dict[str, Dict[str, float]], Dict[str, str]]:
    """
    Per-cluster EVI under the four models; a model that cannot be fitted is reported in the second map
    """
    plan = select_thresholds(data, ladder)
    evis: Dict[str, Dict[str, float]] = {}
    failures: Dict[str, str] = {}
    for model, fitter, model_data in (("M1", fit_mem, data), ("M2", fit_m2, data.drop_b())):
        try:
            fit = fitter(data, plan, quad, opt)
            preds = predict_u(fit, ExceedanceCache(model_data, plan))
            evis[model] = cluster_evi(fit, preds, model_data, plan)
        except PreconditionError as e:
            failures[model] = str(e)
    try:
        fixed = fit_fixed(data, plan)
        m3 = {}
        for c in data:
            if c.cluster_id in fixed.beta_a:
                exceed = c.y > plan.omega[c.cluster_id]
                x_a_bar, x_b_bar = c.x_a[exceed].mean(axis=0), c.x_b[exceed].mean(axis=0)
                eta = x_a_bar @ fixed.beta_a[c.cluster_id] + x_b_bar @ fixed.beta_b
                m3[c.cluster_id] = float(np.exp(eta))
        evis["M3"] = m3
    except PreconditionError as e:
        failures["M3"] = str(e)
    evis["M4"] = {c.cluster_id: hill_fit(c, plan.omega[c.cluster_id]) for c in data if plan.n_j0[c.cluster_id] > 0}
    return evis, failures


def cmd_compare(args: argparse.Namespace) -> int:
    _, data = prepare_table(args)
    quad = quadrature_from_args(args)
    opt = optimizer_from_args(args)
    ladder = ladder_from_args(args)
    evis, failures = model_evis(data, ladder, quad, opt)
    df = pd.DataFrame({"cluster": data.cluster_ids})
    for model in MODELS:
        df[model] = [evis.get(model, {}).get(c, np.nan) for c in data.cluster_ids]
    shared.export_to_csv(df, args.output)
    if args.stability:
        first, second = split_half(data)
        first_evis, _ = model_evis(first, ladder, quad, opt)
        second_evis, _ = model_evis(second, ladder, quad, opt)
        rows = []
        for model in MODELS:
            try:
                rho = rank_stability(first_evis[model], second_evis[model])
            except (KeyError, PreconditionError):
                rho = float("nan")
            rows.append({"model": model, "spearman": rho})
        shared.export_to_csv(pd.DataFrame(rows, columns=["model", "spearman"]), args.stability)
    print(args.output)
    for model, message in failures.items():
        print(f"error: {model} not estimable: {message}", file=sys.stderr)
    return EXIT_PRECONDITION if failures else EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = load_experiment(args.config, quadrature_from_args(args), optimizer_from_args(args))
    summary = run_experiment(spec, shared.resolve_threads(args.threads, configs))
    summary.export_to_csv(args.output)
    if args.qq_dir:
        qq_dir = Path(args.qq_dir)
        qq_dir.mkdir(parents=True, exist_ok=True)
        for (j, level, parameter), table in summary.qq_tables().items():
            shared.export_to_csv(table, str(qq_dir / f"{spec.name}_J{j}_{summary.level_name}{level}_{parameter}.csv"))
    print(args.output)
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "test": cmd_test,
    "gof": cmd_gof,
    "evi": cmd_evi,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
    "select-thresholds": cmd_select_thresholds,
    "intervals": cmd_intervals,
}


def run_command(args: argparse.Namespace) -> int:
    """
    Run a subcommand and map errors to exit codes: 2 parse or config error,
    3 violated precondition, 4 non-convergence
    """
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            code = COMMANDS[args.command](args)
        except DataFormatError as e:
            print(f"error: {e}", file=sys.stderr)
            code = EXIT_PARSE
        except PreconditionError as e:
            print(f"error: {e}", file=sys.stderr)
            code = EXIT_PRECONDITION
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            code = EXIT_PARSE
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return code


def add_fit_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k-min", type=int, help="Smallest candidate exceedance count per cluster")
    parser.add_argument("--k-max", type=int, help="Largest candidate exceedance count per cluster (T)")
    parser.add_argument("--k-step", type=int, help="Step between candidate exceedance counts")
    add_model_arguments(parser)


def add_model_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--quad-mode", choices=["agh", "laplace", "oracle"], help="Integration rule")
    parser.add_argument("--nodes", type=int, help="Gauss-Hermite nodes per random-effect dimension")
    parser.add_argument("--seed", type=int, default=0, help="Seed of the optimizer restarts")
    parser.add_argument("--restarts", type=int, help="Optimizer restarts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Mixed-effects extreme value index regression for clustered data")
    subparser = parser.add_subparsers(dest="command", required=True)

    fit = subparser.add_parser("fit", help="Select thresholds and fit the mixed-effects model")
    fit.add_argument("--input", "-i", required=True, help="CSV with header cluster,y,roleA:<name>,roleB:<name>")
    fit.add_argument("--output", "-o", required=True, help="Filepath to the JSON fit report")
    fit.add_argument(
        "--standardize",
        action="store_true",
        default=False,
        help="Center and scale covariates to zero mean and unit unbiased variance",
    )
    add_fit_arguments(fit)

    for name, help_text in (
        ("predict", "Predict the random effect of every cluster"),
        ("test", "Wald tests of the common-slope coefficients"),
        ("evi", "Cluster-wise EVI ranked in decreasing order"),
        ("gof", "Uniform goodness-of-fit transform and KS statistic"),
        ("intervals", "Asymptotic confidence intervals"),
    ):
        sub = subparser.add_parser(name, help=help_text)
        sub.add_argument("--report", "-r", required=True, help="Filepath to the JSON fit report")
        sub.add_argument("--input", "-i", required=True, help="CSV the report was fitted on")
        sub.add_argument("--output", "-o", required=True, help="Output filepath")
        if name == "gof":
            sub.add_argument("--qq", required=True, help="Filepath to the CSV of sorted S values")
        if name == "intervals":
            sub.add_argument("--level", type=float, default=0.95, help="Coverage of the intervals")

    compare = subparser.add_parser("compare", help="Per-cluster EVI under models M1 to M4")
    compare.add_argument("--input", "-i", required=True, help="CSV with header cluster,y,roleA:<name>,roleB:<name>")
    compare.add_argument("--output", "-o", required=True, help="Filepath to the comparison CSV")
    compare.add_argument("--stability", help="Filepath to the split-half rank stability CSV")
    compare.add_argument("--standardize", action="store_true", default=False, help="Standardize covariates")
    add_fit_arguments(compare)

    select = subparser.add_parser("select-thresholds", help="Select the threshold of every cluster")
    select.add_argument("--input", "-i", required=True, help="CSV with header cluster,y,roleA:<name>,roleB:<name>")
    select.add_argument("--output", "-o", required=True, help="Filepath to the JSON threshold plan")
    select.add_argument("--diagnostics", help="Filepath to the CSV of every candidate and its discrepancy")
    select.add_argument("--k-min", type=int, help="Smallest candidate exceedance count per cluster")
    select.add_argument("--k-max", type=int, help="Largest candidate exceedance count per cluster (T)")
    select.add_argument("--k-step", type=int, help="Step between candidate exceedance counts")

    simulate = subparser.add_parser("simulate", help="Run a Monte Carlo experiment")
    simulate.add_argument("--config", "-c", required=True, help="YAML experiment configuration")
    simulate.add_argument("--output", "-o", required=True, help="Filepath to the summary CSV")
    simulate.add_argument("--qq-dir", help="Folder for the QQ tables of the standardized estimates")
    add_model_arguments(simulate)
    simulate.add_argument("--threads", type=int, help=f"Worker processes (default: ${shared.THREADS_ENV} or config)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return run_command(args)


if __name__ == "__main__":
    sys.exit(main())
