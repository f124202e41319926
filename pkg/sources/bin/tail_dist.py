#!/usr/bin/env python

from dataclasses import dataclass
from typing import (
    List,
    Sequence,
    Union,
)

import numpy as np
from model_core import (
    Cluster,
    ClusteredDataset,
    linear_predictor,
    MemParams,
    Observation,
    PreconditionError,
)
from scipy.optimize import brentq
from scipy.special import (
    betainc,
    gammaln,
    stdtrit,
)

FAMILIES = ("pareto", "student_t", "burr")
COVARIATE_GENERATORS = ("normal01", "uniform_sqrt3")
QUANTILE_TOL = 1e-10

SeedLike = Union[int, Sequence[int], np.random.SeedSequence, np.random.Generator]


@dataclass(frozen=True)
class TailFamily:
    """
    Conditional law of Y given gamma; eta and lam only matter for the Burr family
    """

    kind: str
    eta: float = 1.0
    lam: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in FAMILIES:
            raise PreconditionError(f"unknown family {self.kind}, expected one of {', '.join(FAMILIES)}")
        if not (self.eta > 0 and self.lam > 0):
            raise PreconditionError("Burr eta and lambda must be positive")

    def tail_index(self, gamma: float) -> float:
        """
        Extreme value index of the law at parameter gamma
        """
        _check_gamma(gamma)
        if self.kind == "burr":
            return gamma / self.lam
        return gamma


def _check_gamma(gamma: Union[float, np.ndarray]) -> None:
    if np.any(np.asarray(gamma) <= 0) or not np.all(np.isfinite(gamma)):
        raise PreconditionError("gamma must be positive and finite")


def _student_sf(nu: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Student-t survival function through the regularized incomplete beta function
    """
    upper = 0.5 * betainc(nu / 2.0, 0.5, nu / (nu + y * y))
    return np.where(y >= 0, upper, 1.0 - upper)


def tail_sf(family: TailFamily, gamma: Union[float, np.ndarray], y: Union[float, np.ndarray]) -> np.ndarray:
    """
    Survival function 1 - F(y) given gamma, evaluated without cancellation

    :param family: response law
    :param gamma: EVI, scalar or broadcastable with y
    :param y: evaluation points
    """
    _check_gamma(gamma)
    gamma_arr, y_arr = np.broadcast_arrays(np.asarray(gamma, dtype=float), np.asarray(y, dtype=float))
    if family.kind == "pareto":
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(y_arr >= 1.0, np.power(np.maximum(y_arr, 1.0), -1.0 / gamma_arr), 1.0)
    if family.kind == "student_t":
        return _student_sf(1.0 / gamma_arr, y_arr)
    with np.errstate(over="ignore"):
        base = np.power(np.maximum(y_arr, 0.0), 1.0 / gamma_arr)
        return np.where(y_arr >= 0, np.power(family.eta / (family.eta + base), family.lam), 1.0)


def tail_cdf(family: TailFamily, gamma: Union[float, np.ndarray], y: Union[float, np.ndarray]) -> np.ndarray:
    """
    Conditional CDF of the response given gamma

    :param family: response law
    :param gamma: EVI
    :param y: evaluation points
    """
    return 1.0 - tail_sf(family, gamma, y)


def _refine_student_quantile(nu: float, p: float, guess: float) -> float:
    def objective(y: float) -> float:
        return float(tail_cdf(TailFamily("student_t"), 1.0 / nu, y)) - p

    if abs(objective(guess)) <= QUANTILE_TOL:
        return guess
    width = max(1e-8, 1e-6 * abs(guess))
    low, high = guess - width, guess + width
    while objective(low) > 0:
        low -= 2.0 * (high - low)
    while objective(high) < 0:
        high += 2.0 * (high - low)
    return float(brentq(objective, low, high, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))


def tail_quantile(
    family: TailFamily, gamma: Union[float, np.ndarray], p: Union[float, np.ndarray]
) -> Union[float, np.ndarray]:
    """
    Inverse of tail_cdf

    :param family: response law
    :param gamma: EVI, scalar or broadcastable with p
    :param p: probabilities in (0, 1)
    """
    _check_gamma(gamma)
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0) or np.any(p_arr >= 1) or not np.all(np.isfinite(p_arr)):
        raise PreconditionError("probabilities must lie in the open interval (0, 1)")
    gamma_arr, p_arr = np.broadcast_arrays(np.asarray(gamma, dtype=float), p_arr)
    if family.kind == "pareto":
        q = np.exp(-gamma_arr * np.log1p(-p_arr))
    elif family.kind == "burr":
        q = np.power(family.eta * np.expm1(-np.log1p(-p_arr) / family.lam), gamma_arr)
    else:
        nu = 1.0 / gamma_arr
        q = np.array(stdtrit(nu, p_arr), dtype=float)
        flat_q, flat_nu, flat_p = q.reshape(-1), nu.reshape(-1), p_arr.reshape(-1)
        for i in range(flat_q.size):
            flat_q[i] = _refine_student_quantile(float(flat_nu[i]), float(flat_p[i]), float(flat_q[i]))
        q = flat_q.reshape(p_arr.shape)
    if np.ndim(q) == 0:
        return float(q)
    return q


def hall_tail_constant(family: TailFamily, gamma: float) -> float:
    """
    Limit of y^(1/tail_index) (1 - F(y)) as y grows

    :param family: response law
    :param gamma: EVI parameter of the law
    """
    _check_gamma(gamma)
    if family.kind == "pareto":
        return 1.0
    if family.kind == "burr":
        return float(family.eta**family.lam)
    nu = 1.0 / gamma
    return float(np.exp(gammaln((nu + 1) / 2.0) - gammaln(nu / 2.0) + (nu - 2) / 2.0 * np.log(nu)) / np.sqrt(np.pi))


def draw_covariates(rng: np.random.Generator, covariate_gen: str, size: Sequence[int]) -> np.ndarray:
    """
    Zero-mean unit-variance covariates, standard normal or uniform on (-sqrt 3, sqrt 3)
    """
    if covariate_gen == "normal01":
        return rng.standard_normal(size)
    if covariate_gen == "uniform_sqrt3":
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size)
    raise PreconditionError(
        f"unknown covariate generator {covariate_gen}, expected one of {', '.join(COVARIATE_GENERATORS)}"
    )


def _sample_cluster_arrays(
    family: TailFamily,
    params: MemParams,
    u_j: np.ndarray,
    covariate_gen: str,
    n_j: int,
    rng: np.random.Generator,
) -> Cluster:
    if n_j < 1:
        raise PreconditionError("a cluster needs at least one observation")
    u_j = np.atleast_1d(np.asarray(u_j, dtype=float))
    if u_j.size != params.p_a:
        raise PreconditionError(f"random effect must have length {params.p_a}")
    x_b = draw_covariates(rng, covariate_gen, (n_j, params.p_b))
    x_a = np.hstack([np.ones((n_j, 1)), draw_covariates(rng, covariate_gen, (n_j, params.p_a - 1))])
    uniform = rng.uniform(size=n_j)
    # keep strictly inside (0, 1)
    uniform = np.clip(uniform, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    gamma = np.exp(linear_predictor(params, u_j, x_a, x_b))
    if family.kind == "student_t":
        # positive half: the law of |T|
        uniform = np.minimum(0.5 + 0.5 * uniform, 1.0 - np.finfo(float).epsneg)
        y = np.array(stdtrit(1.0 / gamma, uniform), dtype=float)
    else:
        y = np.asarray(tail_quantile(family, gamma, uniform), dtype=float)
    y = np.maximum(y, np.finfo(float).tiny)
    return Cluster("", y, x_a, x_b)


def sample_cluster(
    family: TailFamily,
    params: MemParams,
    u_j: np.ndarray,
    covariate_gen: str,
    n_j: int,
    rng_seed: SeedLike,
) -> List[Observation]:
    """
    Draw one cluster of observations given its random effect

    :param family: response law
    :param params: fixed effects (Sigma is not used)
    :param u_j: random effect of the cluster
    :param covariate_gen: normal01 or uniform_sqrt3
    :param n_j: number of observations
    :param rng_seed: seed, seed sequence or generator
    """
    rng = np.random.default_rng(rng_seed)
    return _sample_cluster_arrays(family, params, u_j, covariate_gen, n_j, rng).observations()


def simulate_dataset(
    family: TailFamily,
    truth: MemParams,
    covariate_gen: str,
    n_clusters: int,
    n_j: int,
    seed: int,
    replication: int = 0,
) -> ClusteredDataset:
    """
    Generate a clustered dataset with random effects U_j ~ N(0, Sigma).

    Cluster j uses its own stream SeedSequence([seed, replication, j]), so that
    keeping the first J clusters of a larger dataset reproduces the smaller one.

    :param family: response law
    :param truth: true parameters
    :param covariate_gen: normal01 or uniform_sqrt3
    :param n_clusters: number of clusters
    :param n_j: observations per cluster
    :param seed: master seed
    :param replication: replication index
    """
    if n_clusters < 1:
        raise PreconditionError("at least one cluster is required")
    factor = truth.factor
    clusters = []
    for j in range(n_clusters):
        rng = np.random.default_rng(np.random.SeedSequence([seed, replication, j]))
        u_j = factor @ rng.standard_normal(truth.p_a)
        c = _sample_cluster_arrays(family, truth, u_j, covariate_gen, n_j, rng)
        clusters.append(Cluster(f"cluster_{j + 1}", c.y, c.x_a, c.x_b))
    return ClusteredDataset(clusters)
