#!/usr/bin/env python

from dataclasses import (
    dataclass,
    field,
)
from typing import (
    Any,
    Callable,
    Dict,
    List,
    Optional,
    Tuple,
)

import numpy as np
from likelihood import (
    cluster_logliks,
    ExceedanceCache,
    fixed_effects_loglik,
    marginal_loglik,
    QuadratureSpec,
)
from model_core import (
    Cluster,
    ClusteredDataset,
    log_excess,
    MemParams,
    PreconditionError,
    ThresholdPlan,
    vech_indices,
)
from scipy.optimize import minimize

OPTIMIZER_METHODS = ("nelder-mead", "coordinate")
LOG_DIAG_BOUNDS = (-25.0, 10.0)
EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class OptimizerSpec:
    """
    Derivative-free optimizer settings; init None means the data-driven start
    """

    method: str = "nelder-mead"
    max_iters: int = 2000
    f_tol: float = 1e-9
    x_tol: float = 1e-8
    restarts: int = 2
    simplex_scale: float = 0.1
    sigma_floor: float = 1e-8
    seed: int = 0
    init: Optional[MemParams] = None

    def __post_init__(self) -> None:
        if self.method not in OPTIMIZER_METHODS:
            raise PreconditionError(f"unknown optimizer {self.method}, expected one of {', '.join(OPTIMIZER_METHODS)}")
        if self.f_tol <= 0 or self.x_tol <= 0 or self.simplex_scale <= 0 or self.sigma_floor <= 0:
            raise PreconditionError("optimizer tolerances must be positive")
        if self.max_iters < 1 or self.restarts < 0:
            raise PreconditionError("max_iters must be positive and restarts nonnegative")


@dataclass
class FitResult:
    params: MemParams
    loglik: float
    converged: bool
    iterations: int
    threshold_plan: ThresholdPlan
    quad: QuadratureSpec
    boundary_sigma: bool
    init_loglik: float = float("nan")
    n_evaluations: int = 0

    def export_to_dict(self) -> Dict[str, Any]:
        return {
            "params": self.params.export_to_dict(),
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "boundary_sigma": self.boundary_sigma,
            "init_loglik": self.init_loglik,
            "n_evaluations": self.n_evaluations,
            "quadrature": self.quad.export_to_dict(),
            **self.threshold_plan.export_to_dict(),
        }


@dataclass
class FixedFitResult:
    """
    Model M3: one beta_A per cluster and a common beta_B. Flagged clusters have no estimate.
    """

    beta_a: Dict[str, np.ndarray]
    beta_b: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    flagged: List[str] = field(default_factory=list)


def hill_fit(cluster: Cluster, omega: float) -> float:
    """
    Mean log-exceedance ratio of one cluster (model M4)

    :param cluster: observations of the cluster
    :param omega: threshold
    """
    z = log_excess(cluster, omega)
    if z.size == 0:
        raise PreconditionError(f"cluster {cluster.cluster_id} has no exceedance above {omega}")
    return float(np.mean(z))


def _design(cache: ExceedanceCache) -> np.ndarray:
    return np.hstack([cache.x_a, cache.x_b])


def data_driven_init(cache: ExceedanceCache) -> MemParams:
    """
    Least squares of log z on the covariates, intercept from the pooled Hill estimate, Sigma = 0.1 I

    :param cache: exceedances
    """
    design = _design(cache)
    # E log z = eta - Euler's constant under the exponential approximation
    coef = np.linalg.lstsq(design, np.log(cache.z) + EULER_GAMMA, rcond=None)[0]
    beta_a, beta_b = coef[: cache.p_a].copy(), coef[cache.p_a :].copy()
    if np.all(cache.x_a[:, 0] == 1.0):
        others = cache.x_a[:, 1:] @ beta_a[1:] + cache.x_b @ beta_b
        beta_a[0] = np.log(np.mean(cache.z)) - np.mean(others)
    return MemParams.from_sigma(beta_a, beta_b, 0.1 * np.eye(cache.p_a))


def _newton_fixed(
    design: np.ndarray,
    z: np.ndarray,
    start: np.ndarray,
    max_iter: int = 100,
) -> Tuple[np.ndarray, float, bool, int]:
    """
    Maximize sum(-x'b - exp(-x'b) z) by damped Newton steps
    """

    def loglik(beta: np.ndarray) -> float:
        eta = design @ beta
        return float(np.sum(-eta - np.exp(-eta) * z))

    beta = start.copy()
    value = loglik(beta)
    tol = 1e-9 * max(1.0, float(z.size))
    for iteration in range(1, max_iter + 1):
        weight = np.exp(-design @ beta) * z
        grad = design.T @ (weight - 1.0)
        if np.max(np.abs(grad), initial=0.0) <= tol:
            return beta, value, True, iteration - 1
        neg_hessian = design.T @ (weight[:, None] * design)
        try:
            step = np.linalg.solve(neg_hessian, grad)
        except np.linalg.LinAlgError:
            return beta, value, False, iteration
        scale = 1.0
        for _ in range(60):
            trial = beta + scale * step
            trial_value = loglik(trial)
            if trial_value >= value:
                break
            scale *= 0.5
        else:
            return beta, value, False, iteration
        beta, value = trial, trial_value
    return beta, value, False, max_iter


def fit_pooled(data: ClusteredDataset, plan: ThresholdPlan, quad: Optional[QuadratureSpec] = None) -> FitResult:
    """
    Sigma = 0 boundary model: common beta_A and beta_B fitted by Newton on the concave plug-in likelihood

    :param data: clustered dataset
    :param plan: thresholds
    :param quad: integration rule recorded in the result
    """
    cache = ExceedanceCache(data, plan)
    if cache.n_exceedances < data.p_a + data.p_b:
        raise PreconditionError("not enough exceedances to estimate the fixed effects")
    init = data_driven_init(cache)
    start = np.concatenate([init.beta_a, init.beta_b])
    init_params = MemParams.from_sigma(init.beta_a, init.beta_b, np.zeros((data.p_a, data.p_a)))
    beta, value, converged, iterations = _newton_fixed(_design(cache), cache.z, start)
    params = MemParams.from_sigma(beta[: data.p_a], beta[data.p_a :], np.zeros((data.p_a, data.p_a)))
    return FitResult(
        params,
        value,
        converged,
        iterations,
        plan,
        quad or QuadratureSpec(),
        boundary_sigma=True,
        init_loglik=fixed_effects_loglik(init_params, cache),
        n_evaluations=iterations + 1,
    )


def _clip_log_diag(theta: np.ndarray, p_a: int, p_b: int) -> np.ndarray:
    theta = theta.copy()
    rows, cols = vech_indices(p_a)
    diag = p_a + p_b + np.flatnonzero(rows == cols)
    theta[diag] = np.clip(theta[diag], *LOG_DIAG_BOUNDS)
    return theta


def _rotation(seed: int, restart: int, n: int) -> np.ndarray:
    if restart == 0:
        return np.eye(n)
    rng = np.random.default_rng([seed, restart])
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _compass_search(
    objective: Callable[[np.ndarray], float], x0: np.ndarray, directions: np.ndarray, opt: OptimizerSpec
) -> Tuple[np.ndarray, float, bool, int]:
    """
    Coordinate (compass) search along the columns of directions with step halving
    """
    x, fx = x0.copy(), objective(x0)
    step = opt.simplex_scale
    for iteration in range(1, opt.max_iters + 1):
        improved = False
        start_value = fx
        for k in range(directions.shape[1]):
            for sign in (1.0, -1.0):
                trial = x + sign * step * directions[:, k]
                f_trial = objective(trial)
                if f_trial < fx:
                    x, fx, improved = trial, f_trial, True
                    break
        if not improved:
            step *= 0.5
            if step < opt.x_tol:
                return x, fx, True, iteration
        elif abs(start_value - fx) < opt.f_tol and step < opt.x_tol:
            return x, fx, True, iteration
    return x, fx, False, opt.max_iters


def _minimize(
    objective: Callable[[np.ndarray], float], x0: np.ndarray, opt: OptimizerSpec
) -> Tuple[np.ndarray, float, bool, int]:
    """
    Run the configured optimizer with restarts, each from the best point so far with a new orientation.
    Ties in value go to fewer iterations, then to the earlier run.
    """
    n = x0.size
    runs = []
    best_x = x0
    for restart in range(opt.restarts + 1):
        rotation = _rotation(opt.seed, restart, n)
        if opt.method == "nelder-mead":
            simplex = np.vstack([best_x, best_x + opt.simplex_scale * rotation.T])
            res = minimize(
                objective,
                best_x,
                method="Nelder-Mead",
                options={
                    "maxiter": opt.max_iters,
                    "maxfev": 4 * opt.max_iters,
                    "xatol": opt.x_tol,
                    "fatol": opt.f_tol,
                    "initial_simplex": simplex,
                },
            )
            run = (np.asarray(res.x, dtype=float), float(res.fun), bool(res.success), int(res.nit))
        else:
            run = _compass_search(objective, best_x, rotation, opt)
        runs.append(run)
        best = min(range(len(runs)), key=lambda i: (runs[i][1], runs[i][3], i))
        best_x = runs[best][0]
    best = min(range(len(runs)), key=lambda i: (runs[i][1], runs[i][3], i))
    return runs[best]


def _check_estimable(data: ClusteredDataset, plan: ThresholdPlan) -> None:
    p_c = data.p_a * (data.p_a + 1) // 2
    needed = data.p_a + data.p_b + p_c + 1
    n_exceedances = sum(plan.n_j0[c] for c in data.cluster_ids)
    if n_exceedances < needed:
        raise PreconditionError(f"{n_exceedances} exceedances, at least {needed} are needed")
    contributing = sum(1 for c in data.cluster_ids if plan.n_j0[c] >= 1)
    if contributing < 2:
        raise PreconditionError("Sigma is not estimable: fewer than two clusters have exceedances")


def fit_mem(
    data: ClusteredDataset,
    plan: ThresholdPlan,
    quad: Optional[QuadratureSpec] = None,
    opt: Optional[OptimizerSpec] = None,
) -> FitResult:
    """
    Maximize the approximate marginal log-likelihood over (beta_A, beta_B, Sigma) (model M1).

    The interior optimum is compared with the Sigma = 0 fit; the boundary is
    returned when it is at least as good or when every eigenvalue of the interior
    Sigma is below the floor.

    :param data: clustered dataset
    :param plan: thresholds built from data
    :param quad: integration rule
    :param opt: optimizer settings
    """
    quad = quad or QuadratureSpec()
    opt = opt or OptimizerSpec()
    if set(data.cluster_ids) - set(plan.n_j0):
        raise PreconditionError("the threshold plan does not cover every cluster")
    quad.check_dimension(data.p_a)
    _check_estimable(data, plan)
    cache = ExceedanceCache(data, plan)
    init = opt.init if opt.init is not None else data_driven_init(cache)
    if init.p_a != data.p_a or init.p_b != data.p_b:
        raise PreconditionError("initial parameters do not match the data dimensions")
    init_loglik = marginal_loglik(init, cache, quad)

    warm: Dict[str, np.ndarray] = {}
    counter = {"evaluations": 0}

    def objective(theta: np.ndarray) -> float:
        counter["evaluations"] += 1
        theta = _clip_log_diag(theta, data.p_a, data.p_b)
        params = MemParams.from_vector(theta, data.p_a, data.p_b)
        try:
            values, modes = cluster_logliks(params, cache, quad, warm.get("u"))
        except (PreconditionError, np.linalg.LinAlgError):
            return np.inf
        warm["u"] = modes.u
        return -float(np.sum(values))

    x0 = init.to_vector()
    if not np.all(np.isfinite(x0)):
        # a singular initial Sigma is moved to the optimizer's floor
        x0 = np.where(np.isfinite(x0), x0, LOG_DIAG_BOUNDS[0])
    x0 = _clip_log_diag(x0, data.p_a, data.p_b)
    theta, _, converged, iterations = _minimize(objective, x0, opt)
    params = MemParams.from_vector(_clip_log_diag(theta, data.p_a, data.p_b), data.p_a, data.p_b)
    loglik = marginal_loglik(params, cache, quad)

    pooled = fit_pooled(data, plan, quad)
    eigenvalues = np.linalg.eigvalsh(params.sigma)
    boundary = bool(pooled.loglik >= loglik or np.all(eigenvalues < opt.sigma_floor))
    if boundary:
        params, loglik = pooled.params, pooled.loglik
    return FitResult(
        params,
        loglik,
        converged,
        iterations,
        plan,
        quad,
        boundary_sigma=boundary,
        init_loglik=init_loglik,
        n_evaluations=counter["evaluations"] + pooled.n_evaluations,
    )


def fit_m2(
    data: ClusteredDataset,
    plan: ThresholdPlan,
    quad: Optional[QuadratureSpec] = None,
    opt: Optional[OptimizerSpec] = None,
) -> FitResult:
    """
    Model M2: fit_mem without the common-slope covariates
    """
    return fit_mem(data.drop_b(), plan, quad, opt)


def fit_fixed(data: ClusteredDataset, plan: ThresholdPlan, max_iter: int = 100) -> FixedFitResult:
    """
    Model M3: cluster-specific beta_jA and a common beta_B without random effects,
    fitted jointly by damped Newton steps on the concave log-likelihood.
    Clusters with fewer exceedances than A covariates, or a rank-deficient A design,
    are flagged and left out.

    :param data: clustered dataset
    :param plan: thresholds
    :param max_iter: Newton iterations
    """
    p_a, p_b = data.p_a, data.p_b
    kept, flagged = [], []
    for c in data:
        omega = plan.omega[c.cluster_id]
        x_a = c.x_a[c.y > omega]
        if x_a.shape[0] < p_a or np.linalg.matrix_rank(x_a) < p_a:
            flagged.append(c.cluster_id)
        else:
            kept.append(c)
    if not kept:
        raise PreconditionError("no cluster has enough exceedances for its own coefficients")
    kept_data = ClusteredDataset(kept)
    cache = ExceedanceCache(kept_data, plan)
    n_kept = len(kept)
    # block design: one A block per cluster, then the shared B columns
    design = np.zeros((cache.n_exceedances, n_kept * p_a + p_b))
    for j in range(n_kept):
        rows = cache.index == j
        design[rows, j * p_a : (j + 1) * p_a] = cache.x_a[rows]
    design[:, n_kept * p_a :] = cache.x_b
    pooled_start = data_driven_init(cache)
    start = np.concatenate([np.tile(pooled_start.beta_a, n_kept), pooled_start.beta_b])
    beta, value, converged, iterations = _newton_fixed(design, cache.z, start, max_iter)
    if p_b > 0 and np.linalg.matrix_rank(design) < design.shape[1]:
        converged = False
    beta_a = {c.cluster_id: beta[j * p_a : (j + 1) * p_a].copy() for j, c in enumerate(kept)}
    return FixedFitResult(beta_a, beta[n_kept * p_a :].copy(), value, converged, iterations, flagged)
