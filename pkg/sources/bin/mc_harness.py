#!/usr/bin/env python

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import (
    dataclass,
    field,
)
from pathlib import Path
from typing import (
    Any,
    Dict,
    List,
    Mapping,
    Tuple,
    Union,
)

import numpy as np
import pandas as pd
import yaml
from estimation import (
    fit_mem,
    OptimizerSpec,
)
from inference import standardize_estimates
from likelihood import QuadratureSpec
from model_core import (
    DataFormatError,
    effective_counts,
    EvtMemWarning,
    MemParams,
    PreconditionError,
    vech_indices,
)
from scipy.stats import (
    kstest,
    norm,
)
from tail_dist import (
    simulate_dataset,
    TailFamily,
)
from threshold import (
    CandidateLadder,
    select_thresholds,
)

REQUIRED_KEYS = ("name", "family", "beta_a", "beta_b", "sigma2", "j_grid", "replications", "seed")
STATISTICS = ("truth", "mean", "bias", "bias2", "variance", "mse")


@dataclass(frozen=True)
class ExperimentSpec:
    """
    One simulation design. Cells are indexed by (J, n_j0) when n_j0_grid is given,
    by (J, T) otherwise.
    """

    name: str
    family: TailFamily
    covariate_gen: str
    truth: MemParams
    j_grid: Tuple[int, ...]
    replications: int
    seed: int
    n_j: int = 1000
    n_j0_grid: Tuple[int, ...] = ()
    t_grid: Tuple[int, ...] = ()
    k_min: int = 10
    quad: QuadratureSpec = field(default_factory=QuadratureSpec)
    opt: OptimizerSpec = field(default_factory=OptimizerSpec)

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise PreconditionError("at least one replication is required")
        if not self.j_grid or min(self.j_grid) < 1:
            raise PreconditionError("j_grid must list positive cluster counts")
        if bool(self.n_j0_grid) == bool(self.t_grid):
            raise PreconditionError("give exactly one of n_j0_grid and t_grid")
        if self.t_grid and max(self.t_grid) >= self.n_j:
            raise PreconditionError("every T must be smaller than n_j")
        if self.t_grid and min(self.t_grid) < 2:
            raise PreconditionError("every T must be at least 2")
        if self.k_min < 2:
            raise PreconditionError("k_min must be at least 2")

    @property
    def level_name(self) -> str:
        return "n_j0" if self.n_j0_grid else "T"

    @property
    def levels(self) -> Tuple[int, ...]:
        return self.n_j0_grid or self.t_grid

    @property
    def cells(self) -> List[Tuple[int, int]]:
        return [(j, level) for j in self.j_grid for level in self.levels]

    @property
    def parameter_names(self) -> List[str]:
        names = [f"beta_a_{k}" for k in range(self.truth.p_a)] + [f"beta_b_{k}" for k in range(self.truth.p_b)]
        if self.truth.p_a == 1:
            return names + ["sigma2"]
        rows, cols = vech_indices(self.truth.p_a)
        return names + [f"sigma_{r}_{c}" for r, c in zip(rows, cols)]

    @property
    def standardizable(self) -> bool:
        return self.truth.p_a == 1 and self.truth.sigma[0, 0] > 0


def _as_list(value: Any, cast: type, key: str) -> List:
    if isinstance(value, str):
        items: List[Any] = [v.strip() for v in value.split(",") if v.strip()]
    elif isinstance(value, (list, tuple)):
        items = list(value)
    else:
        items = [value]
    try:
        return [cast(v) for v in items]
    except (TypeError, ValueError):
        raise DataFormatError(f"cannot parse {key}: {value}") from None


def _as_scalar(config: Mapping[str, Any], key: str, cast: type, default: Any = None) -> Any:
    if key not in config:
        if default is None:
            raise DataFormatError(f"missing key {key}")
        return default
    try:
        return cast(config[key])
    except (TypeError, ValueError):
        raise DataFormatError(f"cannot parse {key}: {config[key]}") from None


def experiment_from_config(config: Mapping[str, Any], quad: QuadratureSpec, opt: OptimizerSpec) -> ExperimentSpec:
    """
    Build an experiment from a flat mapping; lists may be YAML lists or comma strings

    :param config: experiment keys
    :param quad: default integration rule, overridden by quad_mode and nodes_per_dim
    :param opt: default optimizer, overridden by restarts
    """
    if not isinstance(config, Mapping):
        raise DataFormatError("an experiment config must be a mapping of keys to values")
    missing = [k for k in REQUIRED_KEYS if k not in config]
    if missing:
        raise DataFormatError(f"missing key(s) in experiment config: {', '.join(missing)}")
    beta_a = _as_list(config["beta_a"], float, "beta_a")
    beta_b = _as_list(config["beta_b"], float, "beta_b")
    sigma2 = _as_scalar(config, "sigma2", float)
    try:
        family = TailFamily(
            str(config["family"]),
            _as_scalar(config, "eta", float, 1.0),
            _as_scalar(config, "lambda", float, 1.0),
        )
        truth = MemParams.from_sigma(beta_a, beta_b, sigma2 * np.eye(len(beta_a)))
        quad = QuadratureSpec(
            str(config.get("quad_mode", quad.mode)),
            _as_scalar(config, "nodes_per_dim", int, quad.nodes_per_dim),
            quad.grid_halfwidth_sd,
            quad.grid_points,
        )
        opt = OptimizerSpec(
            opt.method,
            opt.max_iters,
            opt.f_tol,
            opt.x_tol,
            _as_scalar(config, "restarts", int, opt.restarts),
            opt.simplex_scale,
            opt.sigma_floor,
            _as_scalar(config, "seed", int),
        )
        covariate_gen = str(config.get("covariate_gen", "normal01"))
        if covariate_gen not in ("normal01", "uniform_sqrt3"):
            raise PreconditionError(f"unknown covariate generator {covariate_gen}")
        return ExperimentSpec(
            name=str(config["name"]),
            family=family,
            covariate_gen=covariate_gen,
            truth=truth,
            j_grid=tuple(_as_list(config["j_grid"], int, "j_grid")),
            replications=_as_scalar(config, "replications", int),
            seed=_as_scalar(config, "seed", int),
            n_j=_as_scalar(config, "n_j", int, 1000),
            n_j0_grid=tuple(_as_list(config.get("n_j0_grid", []), int, "n_j0_grid")),
            t_grid=tuple(_as_list(config.get("t_grid", []), int, "t_grid")),
            k_min=_as_scalar(config, "k_min", int, 10),
            quad=quad,
            opt=opt,
        )
    except PreconditionError as e:
        raise DataFormatError(f"invalid experiment config: {e}") from None


def load_experiment(path: Union[str, Path], quad: QuadratureSpec, opt: OptimizerSpec) -> ExperimentSpec:
    """
    Read an experiment from a YAML file
    """
    with open(path) as f:
        try:
            config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise DataFormatError(f"cannot parse {path}: {e}") from None
    return experiment_from_config(config, quad, opt)


def _estimates(params: MemParams) -> List[float]:
    rows, cols = vech_indices(params.p_a)
    return list(params.beta_a) + list(params.beta_b) + list(params.sigma[rows, cols])


def _run_replication(spec: ExperimentSpec, replication: int) -> List[Dict[str, Any]]:
    """
    Fit every cell of one replication. Module level so that worker processes can pickle it.
    """
    n_master = max(spec.n_j0_grid) if spec.n_j0_grid else spec.n_j
    master = simulate_dataset(
        spec.family, spec.truth, spec.covariate_gen, max(spec.j_grid), n_master, spec.seed, replication
    )
    plans_by_t = {}
    for t in spec.t_grid:
        plans_by_t[t] = select_thresholds(master, CandidateLadder(min(spec.k_min, t), t))
    records = []
    for j, level in spec.cells:
        if spec.n_j0_grid:
            data = master.subset(j, level)
            plan = effective_counts(data, {c: 1.0 for c in data.cluster_ids})
        else:
            data = master.subset(j)
            plan = effective_counts(data, {c: plans_by_t[level].omega[c] for c in data.cluster_ids})
        record: Dict[str, Any] = {"replication": replication, "J": j, "level": level, "n_0": plan.n_0}
        try:
            fit = fit_mem(data, plan, spec.quad, spec.opt)
        except PreconditionError as e:
            record.update({"converged": False, "boundary": False, "error": str(e)})
            records.append(record)
            continue
        record.update({"converged": fit.converged, "boundary": fit.boundary_sigma, "error": ""})
        record.update(dict(zip(spec.parameter_names, _estimates(fit.params))))
        if spec.standardizable:
            # the covariate generators draw B covariates of zero mean and unit variance
            std = standardize_estimates([fit], spec.truth, plan, data, theta_b=np.eye(spec.truth.p_b))
            record["z_beta_a_0"] = float(std.beta_a[0])
            record["z_sigma2"] = float(std.sigma2[0])
            for k in range(spec.truth.p_b):
                record[f"z_beta_b_{k}"] = float(std.beta_b[0, k])
        records.append(record)
    return records


@dataclass
class CellSummary:
    j: int
    level: int
    n_fits: int
    n_failed: int
    n_boundary: int
    statistics: Dict[str, Dict[str, float]]
    standardized: Dict[str, np.ndarray]
    ks: Dict[str, float]


def _moments(values: List[float], truth: float) -> Dict[str, float]:
    r = len(values)
    if r == 0:
        nan = float("nan")
        return {"truth": truth, "mean": nan, "bias": nan, "bias2": nan, "variance": nan, "mse": nan}
    mean = math.fsum(values) / r
    bias = mean - truth
    if r == 1:
        variance = mse = float("nan")
    else:
        variance = math.fsum((v - mean) ** 2 for v in values) / r
        mse = math.fsum((v - truth) ** 2 for v in values) / r
    return {"truth": truth, "mean": mean, "bias": bias, "bias2": bias * bias, "variance": variance, "mse": mse}


@dataclass
class McSummary:
    name: str
    level_name: str
    replications: int
    cells: List[CellSummary]

    def export_to_frame(self) -> pd.DataFrame:
        """
        Long table with one row per (design, J, level, parameter, statistic)
        """
        rows = []
        for cell in self.cells:
            base = {"design": self.name, "J": cell.j, self.level_name: cell.level}
            for parameter, stats in cell.statistics.items():
                for statistic in STATISTICS:
                    rows.append({**base, "parameter": parameter, "statistic": statistic, "value": stats[statistic]})
            for parameter, value in cell.ks.items():
                rows.append({**base, "parameter": parameter, "statistic": "ks_distance", "value": value})
            for statistic, count in (
                ("n_fits", cell.n_fits),
                ("n_failed", cell.n_failed),
                ("n_boundary_sigma", cell.n_boundary),
            ):
                rows.append({**base, "parameter": "all", "statistic": statistic, "value": float(count)})
        return pd.DataFrame(rows, columns=["design", "J", self.level_name, "parameter", "statistic", "value"])

    def export_to_csv(self, output_fp: Union[str, Path]) -> None:
        self.export_to_frame().to_csv(output_fp, index=False)

    def qq_tables(self) -> Dict[Tuple[int, int, str], pd.DataFrame]:
        """
        QQ table of every standardized sample with at least two values, keyed by (J, level, parameter)
        """
        tables = {}
        for cell in self.cells:
            for parameter, sample in cell.standardized.items():
                if sample.size >= 2:
                    tables[(cell.j, cell.level, parameter)] = qq_export(sample)
        return tables


def qq_export(sample: Union[List[float], np.ndarray]) -> pd.DataFrame:
    """
    Sorted sample against N(0, 1) quantiles at plotting positions (r - 0.5) / n

    :param sample: standardized values
    """
    values = np.sort(np.asarray(sample, dtype=float))
    if values.size < 2:
        raise PreconditionError("a QQ table needs at least two values")
    positions = (np.arange(1, values.size + 1) - 0.5) / values.size
    return pd.DataFrame({"theoretical": norm.ppf(positions), "empirical": values})


def summarize(spec: ExperimentSpec, records: List[Dict[str, Any]]) -> McSummary:
    """
    Aggregate replication records per cell; failed and non-converged fits are excluded and counted
    """
    truths = dict(zip(spec.parameter_names, _estimates(spec.truth)))
    frame = pd.DataFrame(records)
    cells = []
    for j, level in spec.cells:
        cell = frame[(frame["J"] == j) & (frame["level"] == level)]
        used = cell[cell["converged"].astype(bool)]
        statistics = {p: _moments(used[p].tolist() if p in used else [], truths[p]) for p in spec.parameter_names}
        standardized: Dict[str, np.ndarray] = {}
        ks: Dict[str, float] = {}
        for column in [c for c in used.columns if c.startswith("z_")]:
            sample = used[column].to_numpy(dtype=float)
            standardized[column[2:]] = sample
            if sample.size >= 1:
                ks[column[2:]] = float(kstest(sample, "norm").statistic)
        cells.append(
            CellSummary(
                j=j,
                level=level,
                n_fits=len(used),
                n_failed=len(cell) - len(used),
                n_boundary=int(used["boundary"].astype(bool).sum()),
                statistics=statistics,
                standardized=standardized,
                ks=ks,
            )
        )
        if len(used) < len(cell):
            warnings.warn(
                f"{spec.name}: {len(cell) - len(used)} failed or non-converged fit(s) excluded at J={j}, "
                f"{spec.level_name}={level}",
                EvtMemWarning,
                stacklevel=2,
            )
    if spec.replications == 1:
        warnings.warn(
            f"{spec.name}: a single replication leaves variance and MSE undefined (NaN)", EvtMemWarning, stacklevel=2
        )
    return McSummary(spec.name, spec.level_name, spec.replications, cells)


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> McSummary:
    """
    Run every replication, in parallel processes when threads > 1, and summarize the cells.
    Replications are reassembled in index order and aggregated with exact sums.

    :param spec: simulation design
    :param threads: worker processes
    """
    if spec.replications < 1:
        raise PreconditionError("at least one replication is required")
    indices = list(range(spec.replications))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(_run_replication, [spec] * len(indices), indices))
    else:
        results = [_run_replication(spec, r) for r in indices]
    records = [record for replication in results for record in replication]
    return summarize(spec, records)
