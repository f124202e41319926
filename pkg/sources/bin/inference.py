#!/usr/bin/env python

import warnings
from dataclasses import dataclass
from typing import (
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
)

import numpy as np
import pandas as pd
from estimation import FitResult
from likelihood import (
    conditional_modes,
    ExceedanceCache,
)
from model_core import (
    ClusteredDataset,
    duplication_maps,
    EvtMemWarning,
    MemParams,
    PreconditionError,
    ThresholdPlan,
    vech_indices,
)
from scipy.stats import (
    kstest,
    norm,
    spearmanr,
)

SINGULAR_RTOL = 1e-12
MAX_CONDITION = 1e12
# sampling noise of a few hundred exceedances
IDENTITY_MOMENT_ATOL = 0.25


@dataclass
class RandomEffectPredictions:
    u_tilde: Dict[str, np.ndarray]
    inner_converged: Dict[str, bool]

    def export_to_frame(self) -> pd.DataFrame:
        rows = []
        for cluster_id, u in self.u_tilde.items():
            row = {"cluster": cluster_id, "converged": self.inner_converged[cluster_id]}
            row.update({f"u_{k}": float(v) for k, v in enumerate(u)})
            rows.append(row)
        return pd.DataFrame(rows)


@dataclass(frozen=True)
class WaldResult:
    k: int
    t_stat: float
    p_value: float


@dataclass
class LambdaBEstimate:
    """
    Empirical inverse of Lambda_B; lambda_b is None when the inverse is singular
    """

    lambda_b_inv: np.ndarray
    lambda_b: Optional[np.ndarray]
    n_contributing: int
    n_skipped: int

    @property
    def singular(self) -> bool:
        return self.lambda_b is None


@dataclass
class GofResult:
    s_values: np.ndarray
    ks_statistic: float
    ks_pvalue: float


@dataclass
class StandardizedSamples:
    beta_a: np.ndarray
    beta_b: np.ndarray
    sigma2: np.ndarray
    ks: Dict[str, float]


def predict_u(fit: FitResult, cache: ExceedanceCache) -> RandomEffectPredictions:
    """
    Conditional modes of the random effects given the fitted parameters.
    With Sigma = 0 every prediction is zero.

    :param fit: fitted model
    :param cache: exceedances built from the fit's threshold plan
    """
    p_a = fit.params.p_a
    if fit.params.sigma_is_zero:
        return RandomEffectPredictions(
            {c: np.zeros(p_a) for c in cache.cluster_ids}, {c: True for c in cache.cluster_ids}
        )
    modes = conditional_modes(fit.params, cache)
    u_tilde, converged = {}, {}
    for j, cluster_id in enumerate(cache.cluster_ids):
        u_tilde[cluster_id] = np.zeros(p_a) if cache.counts[j] == 0 else modes.u[j].copy()
        converged[cluster_id] = bool(modes.converged[j])
    return RandomEffectPredictions(u_tilde, converged)


def lambda_b_hat(data: ClusteredDataset, plan: ThresholdPlan) -> LambdaBEstimate:
    """
    Average over clusters with exceedances of Psi_BB - Psi_AB' Psi_AA^-1 Psi_AB,
    each Psi the exceedance mean of covariate cross products

    :param data: clustered dataset
    :param plan: thresholds
    """
    if data.p_b == 0:
        raise PreconditionError("the model has no common-slope covariate")
    terms, skipped = [], []
    for c in data:
        exceed = c.y > plan.omega[c.cluster_id]
        n_j0 = int(exceed.sum())
        if n_j0 == 0:
            skipped.append(c.cluster_id)
            continue
        x_a, x_b = c.x_a[exceed], c.x_b[exceed]
        psi_aa = x_a.T @ x_a / n_j0
        psi_ab = x_a.T @ x_b / n_j0
        psi_bb = x_b.T @ x_b / n_j0
        if np.linalg.matrix_rank(psi_aa) < data.p_a:
            raise PreconditionError(f"singular A covariate moments in cluster {c.cluster_id}")
        projected = np.linalg.solve(psi_aa, psi_ab)
        terms.append((psi_bb - psi_ab.T @ projected, np.trace(psi_bb)))
    if skipped:
        warnings.warn(
            f"{len(skipped)} cluster(s) without exceedances left out of Lambda_B: {', '.join(skipped)}",
            EvtMemWarning,
            stacklevel=2,
        )
    if not terms:
        raise PreconditionError("no cluster has exceedances")
    inv = np.mean([t for t, _ in terms], axis=0)
    inv = 0.5 * (inv + inv.T)
    eigenvalues = np.linalg.eigvalsh(inv)
    scale = max(float(eigenvalues[-1]), float(np.mean([tr for _, tr in terms])))
    lambda_b: Optional[np.ndarray] = None
    if eigenvalues[0] > SINGULAR_RTOL * scale and np.linalg.cond(inv) < MAX_CONDITION:
        lambda_b = np.linalg.inv(inv)
        lambda_b = 0.5 * (lambda_b + lambda_b.T)
    else:
        warnings.warn("Lambda_B estimate is singular: Wald tests are unavailable", EvtMemWarning, stacklevel=2)
    return LambdaBEstimate(inv, lambda_b, len(terms), len(skipped))


def wald_test(fit: FitResult, lambda_b: LambdaBEstimate, plan: ThresholdPlan, k: int) -> WaldResult:
    """
    Test beta_Bk = 0 with T_k = (J n_0)^(1/2) beta_Bk / (Lambda_B)_kk^(1/2), bias set to zero

    :param fit: fitted model
    :param lambda_b: Lambda_B estimate
    :param plan: thresholds giving J and n_0
    :param k: zero-based index of the B coefficient
    """
    if lambda_b.lambda_b is None:
        raise PreconditionError("Lambda_B is singular")
    if plan.n_0 <= 0:
        raise PreconditionError("no exceedance: n_0 = 0")
    if not 0 <= k < fit.params.p_b:
        raise PreconditionError(f"coefficient index {k} outside 0..{fit.params.p_b - 1}")
    scale = np.sqrt(plan.n_clusters * plan.n_0 / lambda_b.lambda_b[k, k])
    t_stat = float(scale * fit.params.beta_b[k])
    return WaldResult(k, t_stat, float(2.0 * norm.sf(abs(t_stat))))


def wald_table(
    fit: FitResult, lambda_b: LambdaBEstimate, plan: ThresholdPlan, names: Sequence[str]
) -> pd.DataFrame:
    """
    Wald tests of every B coefficient
    """
    rows = []
    for k, name in enumerate(names):
        result = wald_test(fit, lambda_b, plan, k)
        rows.append(
            {
                "covariate": name,
                "estimate": float(fit.params.beta_b[k]),
                "t_stat": result.t_stat,
                "p_value": result.p_value,
            }
        )
    return pd.DataFrame(rows, columns=["covariate", "estimate", "t_stat", "p_value"])


def cluster_evi(
    fit: FitResult, preds: RandomEffectPredictions, data: ClusteredDataset, plan: ThresholdPlan
) -> Dict[str, float]:
    """
    gamma*_j: the EVI at the exceedance means of the covariates of each cluster.
    Clusters without exceedances are left out with a warning.

    :param fit: fitted model
    :param preds: random-effect predictions
    :param data: clustered dataset
    :param plan: thresholds
    """
    params = fit.params
    result, omitted = {}, []
    for c in data:
        exceed = c.y > plan.omega[c.cluster_id]
        if not exceed.any():
            omitted.append(c.cluster_id)
            continue
        x_a_bar = c.x_a[exceed].mean(axis=0)
        x_b_bar = c.x_b[exceed].mean(axis=0)
        eta = x_a_bar @ (params.beta_a + preds.u_tilde[c.cluster_id]) + x_b_bar @ params.beta_b
        result[c.cluster_id] = float(np.exp(eta))
    if omitted:
        warnings.warn(
            f"{len(omitted)} cluster(s) without exceedances have no EVI: {', '.join(omitted)}",
            EvtMemWarning,
            stacklevel=2,
        )
    return result


def gof_transform(
    fit: FitResult, preds: RandomEffectPredictions, data: ClusteredDataset, plan: ThresholdPlan
) -> GofResult:
    """
    S_ij = (y / omega_j)^(-1 / gamma_ij) over all exceedances, approximately U(0, 1) under a good fit

    :param fit: fitted model
    :param preds: random-effect predictions
    :param data: clustered dataset
    :param plan: thresholds
    """
    params = fit.params
    parts: List[np.ndarray] = []
    for c in data:
        omega = plan.omega[c.cluster_id]
        exceed = c.y > omega
        if not exceed.any():
            continue
        eta = c.x_a[exceed] @ (params.beta_a + preds.u_tilde[c.cluster_id]) + c.x_b[exceed] @ params.beta_b
        parts.append(np.exp(-np.log(c.y[exceed] / omega) * np.exp(-eta)))
    if not parts:
        raise PreconditionError("no exceedance to transform")
    s_values = np.sort(np.concatenate(parts))
    ks = kstest(s_values, "uniform")
    return GofResult(s_values, float(ks.statistic), float(ks.pvalue))


def standardize_estimates(
    fits: Sequence[FitResult],
    truth: MemParams,
    plan: ThresholdPlan,
    data: ClusteredDataset,
    theta_b: Optional[np.ndarray] = None,
) -> StandardizedSamples:
    """
    Standardized estimates of the location-shift model (x_A = 1):
    J^(1/2) (beta_A - truth) / sigma_0, (J n_0)^(1/2) (beta_B - truth) / (Theta_B)_kk^(1/2)
    and J^(1/2) (sigma^2 - truth) / (2^(1/2) sigma_0^2), with their KS distances to N(0, 1).
    Without theta_b, Theta_B is the identity, which requires B covariates of zero mean and
    unit variance over the exceedances of data.

    :param fits: fits of replicated datasets
    :param truth: true parameters
    :param plan: thresholds giving J and n_0
    :param data: dataset the plan was set on
    :param theta_b: asymptotic covariance of the B estimator
    """
    if truth.p_a != 1:
        raise PreconditionError("standardization is defined for the location-shift model (p_A = 1)")
    truth_beta_a = float(truth.beta_a[0])
    truth_beta_b = truth.beta_b
    truth_sigma2 = float(truth.sigma[0, 0])
    if truth_sigma2 <= 0:
        raise PreconditionError("standardization needs a positive true sigma^2")
    if not fits:
        raise PreconditionError("no fit to standardize")
    if any(f.params.p_a != 1 for f in fits):
        raise PreconditionError("standardization is defined for the location-shift model (p_A = 1)")
    p_b = truth_beta_b.size
    exceed = [c.y > plan.omega[c.cluster_id] for c in data]
    x_a = np.vstack([c.x_a[e] for c, e in zip(data, exceed)])
    if x_a.shape[1] != 1 or not np.all(x_a == 1.0):
        raise PreconditionError("standardization is defined for the location-shift model (x_A = 1)")
    if theta_b is None:
        x_b = np.vstack([c.x_b[e] for c, e in zip(data, exceed)])
        if x_b.shape[1] != p_b:
            raise PreconditionError(f"the data has {x_b.shape[1]} B covariate(s), the truth {p_b}")
        if p_b and (
            np.max(np.abs(x_b.mean(axis=0))) > IDENTITY_MOMENT_ATOL
            or np.max(np.abs(x_b.var(axis=0) - 1.0)) > IDENTITY_MOMENT_ATOL
        ):
            raise PreconditionError(
                "B covariates of the exceedances are not centered with unit variance, theta_b must be given"
            )
        theta_diag = np.ones(p_b)
    else:
        theta_diag = np.diag(np.atleast_2d(theta_b))
    j, n_0 = plan.n_clusters, plan.n_0
    sigma0 = np.sqrt(truth_sigma2)
    beta_a = np.array([np.sqrt(j) * (f.params.beta_a[0] - truth_beta_a) / sigma0 for f in fits])
    beta_b = np.array([np.sqrt(j * n_0) * (f.params.beta_b - truth_beta_b) / np.sqrt(theta_diag) for f in fits])
    beta_b = beta_b.reshape(len(fits), p_b)
    sigma2 = np.array([np.sqrt(j) * (f.params.sigma[0, 0] - truth_sigma2) for f in fits])
    sigma2 = sigma2 / (np.sqrt(2.0) * truth_sigma2)
    ks = {"beta_a": float(kstest(beta_a, "norm").statistic), "sigma2": float(kstest(sigma2, "norm").statistic)}
    for k in range(p_b):
        ks[f"beta_b_{k}"] = float(kstest(beta_b[:, k], "norm").statistic)
    return StandardizedSamples(beta_a, beta_b, sigma2, ks)


def lambda_a_hat(fit: FitResult) -> np.ndarray:
    """
    Asymptotic covariance of the beta_A estimator: the fitted Sigma
    """
    return fit.params.sigma


def lambda_c_hat(fit: FitResult) -> np.ndarray:
    """
    Asymptotic covariance of vech(Sigma): 2 {M_* (Sigma x Sigma)^-1 M_*'}^-1

    :param fit: fitted model with a positive definite Sigma
    """
    sigma = fit.params.sigma
    try:
        precision = np.linalg.inv(np.linalg.cholesky(sigma))
    except np.linalg.LinAlgError:
        raise PreconditionError("Lambda_C needs a positive definite Sigma") from None
    precision = precision.T @ precision
    m_star = duplication_maps(fit.params.p_a).m_star
    return 2.0 * np.linalg.inv(m_star @ np.kron(precision, precision) @ m_star.T)


def confidence_intervals(
    fit: FitResult,
    lambda_b: Optional[LambdaBEstimate],
    level: float = 0.95,
    a_names: Optional[Sequence[str]] = None,
    b_names: Optional[Sequence[str]] = None,
) -> pd.DataFrame:
    """
    Asymptotic normal intervals without bias correction: beta_A with sd (Lambda_A,kk / J)^(1/2),
    beta_B with sd (Lambda_B,kk / (J n_0))^(1/2) and vech(Sigma) with sd (Lambda_C,kk / J)^(1/2).
    Unavailable standard errors are NaN.

    :param fit: fitted model
    :param lambda_b: Lambda_B estimate, None without B covariates
    :param level: coverage
    :param a_names: names of the A covariates
    :param b_names: names of the B covariates
    """
    if not 0 < level < 1:
        raise PreconditionError("confidence level must lie in (0, 1)")
    params, plan = fit.params, fit.threshold_plan
    j, n_0 = plan.n_clusters, plan.n_0
    a_names = list(a_names) if a_names is not None else [f"a{k}" for k in range(params.p_a)]
    b_names = list(b_names) if b_names is not None else [f"b{k}" for k in range(params.p_b)]
    rows = []
    lambda_a = lambda_a_hat(fit)
    for k, name in enumerate(a_names):
        rows.append((f"beta_a:{name}", params.beta_a[k], np.sqrt(lambda_a[k, k] / j)))
    for k, name in enumerate(b_names):
        if lambda_b is None or lambda_b.lambda_b is None or n_0 <= 0:
            se = float("nan")
        else:
            se = float(np.sqrt(lambda_b.lambda_b[k, k] / (j * n_0)))
        rows.append((f"beta_b:{name}", params.beta_b[k], se))
    try:
        lambda_c = np.diag(lambda_c_hat(fit))
    except PreconditionError:
        lambda_c = np.full(params.p_a * (params.p_a + 1) // 2, np.nan)
    rows_idx, cols_idx = vech_indices(params.p_a)
    sigma = params.sigma
    for k, (r, c) in enumerate(zip(rows_idx, cols_idx)):
        rows.append((f"sigma:{a_names[r]},{a_names[c]}", sigma[r, c], np.sqrt(lambda_c[k] / j)))
    z = float(norm.ppf(0.5 + level / 2.0))
    frame = pd.DataFrame(rows, columns=["parameter", "estimate", "std_error"])
    frame["lower"] = frame["estimate"] - z * frame["std_error"]
    frame["upper"] = frame["estimate"] + z * frame["std_error"]
    return frame


def rank_stability(first: Mapping[str, float], second: Mapping[str, float]) -> float:
    """
    Spearman rank correlation of two per-cluster EVI maps over their common clusters

    :param first: EVI per cluster from one half of the data
    :param second: EVI per cluster from the other half
    """
    common = [c for c in first if c in second]
    if len(common) < 2:
        raise PreconditionError("rank stability needs at least two common clusters")
    rho = spearmanr([first[c] for c in common], [second[c] for c in common]).correlation
    return float(rho)
