#!/usr/bin/env python

from dataclasses import dataclass
from typing import (
    Iterator,
    NamedTuple,
    Optional,
)

import numpy as np
from model_core import (
    ClusteredDataset,
    linear_predictor,
    log_excess,
    MemParams,
    PreconditionError,
    ThresholdPlan,
)
from numpy.polynomial.hermite import hermgauss
from scipy import sparse
from scipy.special import logsumexp

QUAD_MODES = ("agh", "laplace", "oracle")
MAX_AGH_DIM = 3
NODE_CHUNK = 256
GRID_CHUNK = 2048
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class QuadratureSpec:
    mode: str = "agh"
    nodes_per_dim: int = 15
    grid_halfwidth_sd: float = 10.0
    grid_points: int = 100001

    def __post_init__(self) -> None:
        if self.mode not in QUAD_MODES:
            raise PreconditionError(f"unknown quadrature mode {self.mode}, expected one of {', '.join(QUAD_MODES)}")
        if self.nodes_per_dim < 1:
            raise PreconditionError("nodes_per_dim must be at least 1")
        if self.grid_points < 3 or self.grid_halfwidth_sd <= 0:
            raise PreconditionError("the oracle grid needs at least 3 points and a positive half-width")

    def check_dimension(self, p_a: int) -> None:
        if self.mode == "oracle" and p_a != 1:
            raise PreconditionError("the dense-grid oracle only integrates one random effect (p_A = 1)")
        if self.mode == "agh" and p_a > MAX_AGH_DIM:
            raise PreconditionError(
                f"adaptive Gauss-Hermite is limited to p_A <= {MAX_AGH_DIM}, use the laplace mode for p_A = {p_a}"
            )

    def export_to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "nodes_per_dim": self.nodes_per_dim,
            "grid_halfwidth_sd": self.grid_halfwidth_sd,
            "grid_points": self.grid_points,
        }


class ClusterExceedances(NamedTuple):
    z: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray


class ExceedanceCache:
    """
    Exceedances of all clusters stored flat, in cluster then storage order.

    indicator is the sparse J x N matrix mapping observations to their cluster, so
    that per-cluster sums are a single product. Clusters without exceedances keep
    their row (with no entry).
    """

    def __init__(self, data: ClusteredDataset, plan: ThresholdPlan) -> None:
        z_parts, a_parts, b_parts, index_parts = [], [], [], []
        for j, c in enumerate(data):
            if c.cluster_id not in plan.omega:
                raise PreconditionError(f"no threshold for cluster {c.cluster_id}")
            omega = plan.omega[c.cluster_id]
            exceed = c.y > omega
            z_parts.append(log_excess(c, omega))
            a_parts.append(c.x_a[exceed])
            b_parts.append(c.x_b[exceed])
            index_parts.append(np.full(int(exceed.sum()), j, dtype=int))
        self.cluster_ids = data.cluster_ids
        self.omega = {k: plan.omega[k] for k in self.cluster_ids}
        self.p_a = data.p_a
        self.p_b = data.p_b
        self.z = np.concatenate(z_parts)
        self.x_a = np.vstack(a_parts)
        self.x_b = np.vstack(b_parts)
        self.index = np.concatenate(index_parts)
        self.counts = np.bincount(self.index, minlength=len(self.cluster_ids))
        n = self.z.size
        self.indicator = sparse.csr_matrix(
            (np.ones(n), (self.index, np.arange(n))), shape=(len(self.cluster_ids), n)
        )

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    @property
    def n_exceedances(self) -> int:
        return int(self.z.size)

    def cluster(self, cluster_id: str) -> ClusterExceedances:
        j = self.cluster_ids.index(cluster_id)
        rows = self.index == j
        return ClusterExceedances(self.z[rows], self.x_a[rows], self.x_b[rows])

    def cluster_sums(self, values: np.ndarray) -> np.ndarray:
        """
        Sum per-observation values (first axis) within every cluster
        """
        values = np.asarray(values, dtype=float)
        flat = values.reshape(values.shape[0], int(np.prod(values.shape[1:])))
        return np.asarray(self.indicator @ flat).reshape((self.n_clusters,) + values.shape[1:])


def _sigma_precision(params: MemParams) -> np.ndarray:
    """
    Cholesky factor of a strictly positive definite Sigma
    """
    try:
        return np.linalg.cholesky(params.sigma)
    except np.linalg.LinAlgError:
        raise PreconditionError(
            "Sigma is singular: evaluate the Sigma = 0 model with fixed_effects_loglik instead"
        ) from None


def _log_normal_density(u: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """
    log phi(u; 0, chol chol') over the last axis of u
    """
    p = chol.shape[0]
    flat = u.reshape(-1, p)
    solved = np.linalg.solve(chol, flat.T)
    quad = np.sum(solved * solved, axis=0)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return (-0.5 * (p * LOG_2PI + log_det + quad)).reshape(u.shape[:-1])


def cluster_integrand_log(params: MemParams, cache_j: ClusterExceedances, u: np.ndarray) -> float:
    """
    Log of the integrand of one cluster at u

    :param params: model parameters, Sigma strictly positive definite
    :param cache_j: exceedances of the cluster
    :param u: random effect
    """
    chol = _sigma_precision(params)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.size != params.p_a:
        raise PreconditionError(f"random effect must have length {params.p_a}")
    value = float(_log_normal_density(u, chol))
    if cache_j.z.size:
        eta = linear_predictor(params, u, cache_j.x_a, cache_j.x_b)
        value += float(np.sum(-eta - np.exp(-eta) * cache_j.z))
    if not np.isfinite(value):
        raise PreconditionError("non-finite integrand")
    return value


def fixed_effects_loglik(params: MemParams, cache: ExceedanceCache) -> float:
    """
    Log-likelihood with every random effect at zero, the exact value of the Sigma = 0 model

    :param params: model parameters (Sigma is not used)
    :param cache: exceedances
    """
    eta = linear_predictor(params, np.zeros(params.p_a), cache.x_a, cache.x_b)
    return float(np.sum(-eta - np.exp(-eta) * cache.z))


class ModeSolution(NamedTuple):
    u: np.ndarray
    neg_hessian: np.ndarray
    log_h: np.ndarray
    grad_norm: np.ndarray
    converged: np.ndarray


class _Evaluator:
    """
    Per-cluster log-integrand with its gradient and negative Hessian, vectorised over clusters
    """

    def __init__(self, params: MemParams, cache: ExceedanceCache) -> None:
        self.cache = cache
        self.chol = _sigma_precision(params)
        self.precision = np.linalg.inv(params.sigma)
        self.precision = 0.5 * (self.precision + self.precision.T)
        self.base = linear_predictor(params, np.zeros(params.p_a), cache.x_a, cache.x_b)
        self.log_det = 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        self.p = params.p_a

    def eta(self, u: np.ndarray) -> np.ndarray:
        return self.base + np.sum(self.cache.x_a * u[self.cache.index], axis=1)

    def log_h(self, u: np.ndarray) -> np.ndarray:
        eta = self.eta(u)
        data = self.cache.cluster_sums(-eta - np.exp(-eta) * self.cache.z)
        quad = np.einsum("jp,pq,jq->j", u, self.precision, u)
        return data - 0.5 * (self.p * LOG_2PI + self.log_det + quad)

    def derivatives(self, u: np.ndarray) -> tuple:
        eta = self.eta(u)
        weight = np.exp(-eta) * self.cache.z
        x_a = self.cache.x_a
        grad = self.cache.cluster_sums((weight - 1.0)[:, None] * x_a) - u @ self.precision
        outer = weight[:, None, None] * x_a[:, :, None] * x_a[:, None, :]
        neg_hessian = self.cache.cluster_sums(outer) + self.precision
        return grad, neg_hessian


def conditional_modes(
    params: MemParams,
    cache: ExceedanceCache,
    start: Optional[np.ndarray] = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> ModeSolution:
    """
    Maximize the log-integrand of every cluster by safeguarded Newton steps.

    The problem is strictly concave when Sigma is positive definite. A cluster
    still above tolerance after max_iter Newton steps is flagged and moved on by
    bisection along its gradient.

    :param params: model parameters, Sigma strictly positive definite
    :param cache: exceedances
    :param start: initial modes, zero by default
    :param max_iter: Newton iterations
    :param tol: gradient sup-norm at convergence
    """
    ev = _Evaluator(params, cache)
    j = cache.n_clusters
    u = np.zeros((j, params.p_a)) if start is None else np.array(start, dtype=float).reshape(j, params.p_a)
    value = ev.log_h(u)
    grad, neg_hessian = ev.derivatives(u)
    for _ in range(max_iter):
        grad_norm = np.max(np.abs(grad), axis=1)
        active = grad_norm > tol
        if not active.any():
            break
        step = np.linalg.solve(neg_hessian, grad[:, :, None])[:, :, 0]
        step[~active] = 0.0
        scale = np.ones(j)
        accepted = ~active
        trial_u = u
        for _ in range(60):
            trial_u = u + scale[:, None] * step
            trial_value = ev.log_h(trial_u)
            improved = trial_value >= value
            accepted = accepted | improved
            if accepted.all():
                break
            scale = np.where(accepted, scale, 0.5 * scale)
        moved = active & accepted
        if not moved.any():
            break
        u = np.where(moved[:, None], trial_u, u)
        value = ev.log_h(u)
        grad, neg_hessian = ev.derivatives(u)
    grad_norm = np.max(np.abs(grad), axis=1)
    converged = grad_norm <= tol
    if not converged.all():
        u = _gradient_bisection(ev, u, ~converged)
        value = ev.log_h(u)
        grad, neg_hessian = ev.derivatives(u)
        grad_norm = np.max(np.abs(grad), axis=1)
    return ModeSolution(u, neg_hessian, value, grad_norm, converged)


def _gradient_bisection(ev: _Evaluator, u: np.ndarray, flagged: np.ndarray, rounds: int = 50) -> np.ndarray:
    """
    Line maximization along the gradient by bisection on the directional derivative
    """
    u = u.copy()
    for _ in range(rounds):
        grad, neg_hessian = ev.derivatives(u)
        direction = np.where(flagged[:, None], grad, 0.0)
        norm = np.linalg.norm(direction, axis=1)
        if np.all(norm <= 1e-14):
            break
        curvature = np.einsum("jp,jpq,jq->j", direction, neg_hessian, direction)
        high = np.where(norm > 0, 2.0 * norm**2 / np.maximum(curvature, 1e-300), 0.0)
        low = np.zeros_like(high)
        for _ in range(60):
            mid = 0.5 * (low + high)
            slope = np.sum(ev.derivatives(u + mid[:, None] * direction)[0] * direction, axis=1)
            low = np.where(slope > 0, mid, low)
            high = np.where(slope > 0, high, mid)
        u = u + low[:, None] * direction
    return u


def _log_laplace(modes: ModeSolution, p: int) -> np.ndarray:
    _, log_det = np.linalg.slogdet(modes.neg_hessian)
    return modes.log_h + 0.5 * p * LOG_2PI - 0.5 * log_det


def _tensor_nodes(nodes_per_dim: int, p: int) -> tuple:
    t, w = hermgauss(nodes_per_dim)
    grids = np.meshgrid(*([t] * p), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weight_grids = np.meshgrid(*([np.log(w)] * p), indexing="ij")
    log_w = np.sum([g.ravel() for g in weight_grids], axis=0)
    return nodes, log_w + np.sum(nodes * nodes, axis=1)


def _chunks(total: int, size: int) -> Iterator[slice]:
    for start in range(0, total, size):
        yield slice(start, min(total, start + size))


def _log_agh(ev: _Evaluator, modes: ModeSolution, nodes_per_dim: int) -> np.ndarray:
    cache = ev.cache
    p = ev.p
    chol_h = np.linalg.cholesky(modes.neg_hessian)
    # root @ root' = inverse negative Hessian
    root = np.sqrt(2.0) * np.transpose(np.linalg.inv(chol_h), (0, 2, 1))
    log_jacobian = 0.5 * p * np.log(2.0) - np.sum(np.log(np.diagonal(chol_h, axis1=1, axis2=2)), axis=1)
    nodes, log_w = _tensor_nodes(nodes_per_dim, p)
    eta_hat = ev.eta(modes.u)
    loadings = np.einsum("ip,ipq->iq", cache.x_a, root[cache.index])
    partial = []
    for chunk in _chunks(nodes.shape[0], NODE_CHUNK):
        t = nodes[chunk]
        eta = eta_hat[:, None] + loadings @ t.T
        data = cache.cluster_sums(-eta - np.exp(-eta) * cache.z[:, None])
        u = modes.u[:, None, :] + np.einsum("jpq,kq->jkp", root, t)
        prior = _log_normal_density(u, ev.chol)
        partial.append(logsumexp(data + prior + log_w[chunk][None, :], axis=1))
    return log_jacobian + logsumexp(np.stack(partial, axis=1), axis=1)


def _log_oracle(ev: _Evaluator, modes: ModeSolution, quad: QuadratureSpec) -> np.ndarray:
    cache = ev.cache
    sd = 1.0 / np.sqrt(modes.neg_hessian[:, 0, 0])
    offsets = np.linspace(-quad.grid_halfwidth_sd, quad.grid_halfwidth_sd, quad.grid_points)
    step = offsets[1] - offsets[0]
    log_trap = np.full(offsets.size, np.log(step))
    log_trap[[0, -1]] += np.log(0.5)
    eta_hat = ev.eta(modes.u)
    loadings = cache.x_a[:, 0] * sd[cache.index]
    partial = []
    for chunk in _chunks(offsets.size, GRID_CHUNK):
        s = offsets[chunk]
        eta = eta_hat[:, None] + loadings[:, None] * s[None, :]
        data = cache.cluster_sums(-eta - np.exp(-eta) * cache.z[:, None])
        u = modes.u[:, 0][:, None] + sd[:, None] * s[None, :]
        prior = _log_normal_density(u[:, :, None], ev.chol)
        partial.append(logsumexp(data + prior + log_trap[chunk][None, :], axis=1))
    return np.log(sd) + logsumexp(np.stack(partial, axis=1), axis=1)


def cluster_logliks(
    params: MemParams,
    cache: ExceedanceCache,
    quad: QuadratureSpec,
    start: Optional[np.ndarray] = None,
) -> tuple:
    """
    Per-cluster log-integrals together with the conditional modes used to center them

    :param params: model parameters
    :param cache: exceedances
    :param quad: integration rule
    :param start: warm start for the conditional modes
    """
    quad.check_dimension(params.p_a)
    modes = conditional_modes(params, cache, start=start)
    if quad.mode == "laplace":
        values = _log_laplace(modes, params.p_a)
    else:
        ev = _Evaluator(params, cache)
        values = _log_agh(ev, modes, quad.nodes_per_dim) if quad.mode == "agh" else _log_oracle(ev, modes, quad)
    if not np.all(np.isfinite(values)):
        raise PreconditionError("non-finite integrand")
    return values, modes


def marginal_loglik(
    params: MemParams,
    cache: ExceedanceCache,
    quad: QuadratureSpec,
    start: Optional[np.ndarray] = None,
) -> float:
    """
    Approximate marginal log-likelihood summed over clusters.
    Sigma = 0 is evaluated exactly as the plug-in likelihood at u = 0.

    :param params: model parameters
    :param cache: exceedances
    :param quad: integration rule
    :param start: warm start for the conditional modes
    """
    quad.check_dimension(params.p_a)
    if params.sigma_is_zero:
        return fixed_effects_loglik(params, cache)
    values, _ = cluster_logliks(params, cache, quad, start)
    return float(np.sum(values))


def loglik_gradient_fd(params: MemParams, cache: ExceedanceCache, quad: QuadratureSpec) -> np.ndarray:
    """
    Central finite differences of marginal_loglik over the unconstrained parameter vector,
    with step 1e-5 (1 + |theta_k|) per coordinate

    :param params: model parameters
    :param cache: exceedances
    :param quad: integration rule
    """
    theta = params.to_vector()
    if not np.all(np.isfinite(theta)):
        raise PreconditionError("finite differences need a finite parameter vector (Sigma on the boundary)")
    if not np.isfinite(marginal_loglik(params, cache, quad)):
        raise PreconditionError("log-likelihood is not finite at the given parameters")
    grad = np.zeros(theta.size)
    for k in range(theta.size):
        h = 1e-5 * (1.0 + abs(theta[k]))
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        f_up = marginal_loglik(MemParams.from_vector(up, params.p_a, params.p_b), cache, quad)
        f_down = marginal_loglik(MemParams.from_vector(down, params.p_a, params.p_b), cache, quad)
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            raise PreconditionError("non-finite log-likelihood near the parameters")
        grad[k] = (f_up - f_down) / (2.0 * h)
    return grad
