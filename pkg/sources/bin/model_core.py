#!/usr/bin/env python

from dataclasses import dataclass
from typing import (
    Dict,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
import pandas as pd

SYMMETRY_TOL = 1e-12


class EvtMemWarning(UserWarning):
    """
    Soft condition raised by the library (omitted clusters, singular estimates, ...)
    """


class DataFormatError(ValueError):
    """
    Malformed input table, header or configuration
    """


class PreconditionError(ValueError):
    """
    An operation was called outside of its domain
    """


def _read_only(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _as_matrix(x: np.ndarray, n: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and n == 1:
        x = x.reshape(1, -1)
    if x.ndim == 1 and x.size == 0:
        x = x.reshape(n, 0)
    if x.ndim != 2 or x.shape[0] != n:
        raise PreconditionError(f"{name} must have {n} rows, got shape {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class Observation:
    """
    One response with its random-slope (A) and common-slope (B) covariates
    """

    y: float
    x_a: np.ndarray
    x_b: np.ndarray

    def __post_init__(self) -> None:
        if not np.isfinite(self.y) or self.y <= 0:
            raise PreconditionError(f"response must be positive, got {self.y}")
        object.__setattr__(self, "x_a", _read_only(np.atleast_1d(self.x_a)))
        object.__setattr__(self, "x_b", _read_only(np.atleast_1d(self.x_b)))


@dataclass(frozen=True, eq=False)
class Cluster:
    """
    All observations of one cluster stored column-wise
    """

    cluster_id: str
    y: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).ravel()
        if y.size == 0:
            raise PreconditionError(f"cluster {self.cluster_id} is empty")
        if not np.all(np.isfinite(y)) or np.any(y <= 0):
            raise PreconditionError(f"cluster {self.cluster_id} has nonpositive or non-finite responses")
        x_a = _as_matrix(self.x_a, y.size, "x_a")
        x_b = _as_matrix(self.x_b, y.size, "x_b")
        if x_a.shape[1] < 1:
            raise PreconditionError("at least one A covariate (the intercept) is required")
        if not (np.all(np.isfinite(x_a)) and np.all(np.isfinite(x_b))):
            raise PreconditionError(f"cluster {self.cluster_id} has non-finite covariates")
        object.__setattr__(self, "cluster_id", str(self.cluster_id))
        object.__setattr__(self, "y", _read_only(y))
        object.__setattr__(self, "x_a", _read_only(x_a))
        object.__setattr__(self, "x_b", _read_only(x_b))

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def p_a(self) -> int:
        return int(self.x_a.shape[1])

    @property
    def p_b(self) -> int:
        return int(self.x_b.shape[1])

    def observations(self) -> List[Observation]:
        """
        Expand the cluster into its list of observations, in storage order
        """
        return [Observation(float(self.y[i]), self.x_a[i], self.x_b[i]) for i in range(self.n)]

    def select(self, mask: np.ndarray) -> "Cluster":
        """
        Keep the rows where mask is true (or the given row indices)
        """
        return Cluster(self.cluster_id, self.y[mask], self.x_a[mask], self.x_b[mask])


class ClusteredDataset:
    """
    Ordered collection of clusters sharing the covariate dimensions p_A and p_B.
    Cluster order is ingestion order and is never changed.
    """

    def __init__(self, clusters: Sequence[Cluster]) -> None:
        if len(clusters) == 0:
            raise PreconditionError("a dataset needs at least one cluster")
        p_a, p_b = clusters[0].p_a, clusters[0].p_b
        seen = set()
        for c in clusters:
            if c.p_a != p_a or c.p_b != p_b:
                raise PreconditionError(
                    f"cluster {c.cluster_id} has dimensions ({c.p_a}, {c.p_b}), expected ({p_a}, {p_b})"
                )
            if c.cluster_id in seen:
                raise PreconditionError(f"duplicated cluster id {c.cluster_id}")
            seen.add(c.cluster_id)
        self.clusters: Tuple[Cluster, ...] = tuple(clusters)
        self.p_a = p_a
        self.p_b = p_b

    @classmethod
    def from_observations(cls, groups: Sequence[Tuple[str, Sequence[Observation]]]) -> "ClusteredDataset":
        """
        Build a dataset from (cluster_id, observations) pairs

        :param groups: ordered clusters with their observations
        """
        clusters = []
        for cluster_id, observations in groups:
            if len(observations) == 0:
                raise PreconditionError(f"cluster {cluster_id} is empty")
            clusters.append(
                Cluster(
                    cluster_id,
                    np.array([o.y for o in observations]),
                    np.vstack([o.x_a for o in observations]),
                    np.vstack([o.x_b.reshape(1, -1) for o in observations]),
                )
            )
        return cls(clusters)

    def __iter__(self) -> Iterator[Cluster]:
        return iter(self.clusters)

    def __len__(self) -> int:
        return len(self.clusters)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_total(self) -> int:
        return sum(c.n for c in self.clusters)

    @property
    def cluster_ids(self) -> List[str]:
        return [c.cluster_id for c in self.clusters]

    def cluster(self, cluster_id: str) -> Cluster:
        for c in self.clusters:
            if c.cluster_id == cluster_id:
                return c
        raise KeyError(cluster_id)

    def subset(self, n_clusters: int, n_obs: Optional[int] = None) -> "ClusteredDataset":
        """
        Keep the first n_clusters clusters and, optionally, the first n_obs rows of each

        :param n_clusters: number of leading clusters to keep
        :param n_obs: number of leading observations to keep per cluster
        """
        if n_clusters < 1 or n_clusters > self.n_clusters:
            raise PreconditionError(f"cannot keep {n_clusters} of {self.n_clusters} clusters")
        kept = self.clusters[:n_clusters]
        if n_obs is not None:
            if any(c.n < n_obs for c in kept):
                raise PreconditionError(f"some clusters have fewer than {n_obs} observations")
            kept = tuple(c.select(slice(0, n_obs)) for c in kept)  # type: ignore[arg-type]
        return ClusteredDataset(kept)

    def drop_b(self) -> "ClusteredDataset":
        """
        Same data without the common-slope covariates
        """
        return ClusteredDataset([Cluster(c.cluster_id, c.y, c.x_a, np.empty((c.n, 0))) for c in self.clusters])

    def scale_b(self, factor: float) -> "ClusteredDataset":
        return ClusteredDataset([Cluster(c.cluster_id, c.y, c.x_a, c.x_b * factor) for c in self.clusters])

    def select_rows(self, masks: Mapping[str, np.ndarray]) -> "ClusteredDataset":
        """
        Keep, per cluster, the rows flagged in masks. Clusters left empty are dropped.

        :param masks: boolean row mask per cluster id
        """
        kept = []
        for c in self.clusters:
            mask = np.asarray(masks[c.cluster_id], dtype=bool)
            if mask.any():
                kept.append(c.select(mask))
        return ClusteredDataset(kept)

    def split(self, masks: Mapping[str, np.ndarray]) -> Tuple["ClusteredDataset", "ClusteredDataset"]:
        """
        Split every cluster in two: rows flagged in masks, then the remaining rows

        :param masks: boolean row mask per cluster id
        """
        complement = {k: ~np.asarray(v, dtype=bool) for k, v in masks.items()}
        return self.select_rows(masks), self.select_rows(complement)

    @classmethod
    def from_frame(
        cls,
        df: pd.DataFrame,
        cluster_col: str,
        y_col: str,
        a_cols: Sequence[str],
        b_cols: Sequence[str],
        intercept: bool = True,
    ) -> "ClusteredDataset":
        """
        Group a validated table into clusters, keeping first-appearance order of the cluster ids

        :param df: table with numeric response and covariate columns
        :param cluster_col: cluster id column
        :param y_col: response column
        :param a_cols: random-slope covariate columns
        :param b_cols: common-slope covariate columns
        :param intercept: prepend a column of ones to the A covariates
        """
        clusters = []
        for cluster_id, group in df.groupby(cluster_col, sort=False):
            x_a = group[list(a_cols)].to_numpy(dtype=float)
            if intercept:
                x_a = np.hstack([np.ones((len(group), 1)), x_a])
            x_b = group[list(b_cols)].to_numpy(dtype=float).reshape(len(group), len(b_cols))
            clusters.append(Cluster(str(cluster_id), group[y_col].to_numpy(dtype=float), x_a, x_b))
        return cls(clusters)


def _validate_square(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise PreconditionError(f"{name} must be a square matrix, got shape {a.shape}")
    return a


def vech_indices(d: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row and column indices of the lower triangle stacked column by column
    """
    cols, rows = np.triu_indices(d)
    return rows, cols


def vech(a: np.ndarray) -> np.ndarray:
    """
    Stack the lower triangular half of a symmetric matrix column by column

    :param a: symmetric d x d matrix
    """
    a = _validate_square(a, "a")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise PreconditionError("vech requires a symmetric matrix")
    rows, cols = vech_indices(a.shape[0])
    return a[rows, cols].copy()


def unvech(v: np.ndarray, d: int) -> np.ndarray:
    """
    Rebuild the symmetric d x d matrix from its half-vectorization

    :param v: vector of length d(d+1)/2
    :param d: matrix dimension
    """
    v = np.asarray(v, dtype=float).ravel()
    if v.size != d * (d + 1) // 2:
        raise PreconditionError(f"vech of a {d}x{d} matrix has length {d * (d + 1) // 2}, got {v.size}")
    a = np.zeros((d, d))
    rows, cols = vech_indices(d)
    a[rows, cols] = v
    a[cols, rows] = v
    return a


@dataclass(frozen=True, eq=False)
class DuplicationMaps:
    """
    m maps vech(A) to vec(A); m_star is its Moore-Penrose inverse
    """

    m: np.ndarray
    m_star: np.ndarray


def duplication_maps(p_a: int) -> DuplicationMaps:
    """
    Duplication matrix M and M_* = (M'M)^-1 M' for p_a x p_a symmetric matrices

    :param p_a: matrix dimension
    """
    if p_a < 1:
        raise PreconditionError("dimension must be positive")
    p_c = p_a * (p_a + 1) // 2
    position = {}
    for k, (i, j) in enumerate(zip(*vech_indices(p_a))):
        position[(int(i), int(j))] = k
    m = np.zeros((p_a * p_a, p_c))
    for j in range(p_a):
        for i in range(p_a):
            # vec stacks columns
            m[j * p_a + i, position[(max(i, j), min(i, j))]] = 1.0
    m_star = np.linalg.solve(m.T @ m, m.T)
    return DuplicationMaps(_read_only(m), _read_only(m_star))


def _psd_cholesky(sigma: np.ndarray) -> np.ndarray:
    """
    Lower-triangular L with L L' = sigma for a positive semi-definite sigma; zero pivots give zero columns
    """
    d = sigma.shape[0]
    scale = max(1.0, float(np.max(np.abs(np.diag(sigma))))) if d else 1.0
    factor = np.zeros((d, d))
    for j in range(d):
        pivot = sigma[j, j] - float(factor[j, :j] @ factor[j, :j])
        if pivot < -1e-10 * scale:
            raise PreconditionError("sigma is not positive semi-definite")
        if pivot <= 0:
            continue
        factor[j, j] = np.sqrt(pivot)
        for i in range(j + 1, d):
            factor[i, j] = (sigma[i, j] - float(factor[i, :j] @ factor[j, :j])) / factor[j, j]
    return factor


@dataclass(frozen=True, eq=False)
class MemParams:
    """
    Fixed effects beta_A, beta_B and the random-effect covariance Sigma.

    Sigma is stored through chol_log, the column-wise half-vectorization of its
    lower Cholesky factor with the diagonal entries replaced by their logs, so
    every real vector is a valid parameter. A log-diagonal of -inf encodes a zero
    pivot, which makes Sigma = 0 representable.
    """

    beta_a: np.ndarray
    beta_b: np.ndarray
    chol_log: np.ndarray

    def __post_init__(self) -> None:
        beta_a = _read_only(np.atleast_1d(self.beta_a).ravel())
        beta_b = _read_only(np.asarray(self.beta_b, dtype=float).ravel())
        chol_log = _read_only(np.atleast_1d(self.chol_log).ravel())
        p_a = beta_a.size
        if p_a < 1:
            raise PreconditionError("beta_a must have at least one entry")
        if chol_log.size != p_a * (p_a + 1) // 2:
            raise PreconditionError(f"chol_log must have {p_a * (p_a + 1) // 2} entries, got {chol_log.size}")
        object.__setattr__(self, "beta_a", beta_a)
        object.__setattr__(self, "beta_b", beta_b)
        object.__setattr__(self, "chol_log", chol_log)

    @property
    def p_a(self) -> int:
        return int(self.beta_a.size)

    @property
    def p_b(self) -> int:
        return int(self.beta_b.size)

    @property
    def factor(self) -> np.ndarray:
        rows, cols = vech_indices(self.p_a)
        values = np.array(self.chol_log, dtype=float)
        on_diag = rows == cols
        values[on_diag] = np.exp(values[on_diag])
        factor = np.zeros((self.p_a, self.p_a))
        factor[rows, cols] = values
        return factor

    @property
    def sigma(self) -> np.ndarray:
        factor = self.factor
        return factor @ factor.T

    @property
    def sigma_is_zero(self) -> bool:
        return bool(np.all(self.sigma == 0.0))

    @classmethod
    def from_sigma(cls, beta_a: Sequence[float], beta_b: Sequence[float], sigma: np.ndarray) -> "MemParams":
        """
        Build parameters from an explicit covariance matrix

        :param beta_a: random-slope fixed effects
        :param beta_b: common-slope fixed effects
        :param sigma: symmetric positive semi-definite covariance, may be singular
        """
        beta_a_arr = np.atleast_1d(np.asarray(beta_a, dtype=float))
        sigma = _validate_square(np.atleast_2d(sigma), "sigma")
        if sigma.shape[0] != beta_a_arr.size:
            raise PreconditionError(f"sigma must be {beta_a_arr.size}x{beta_a_arr.size}")
        factor = _psd_cholesky(0.5 * (sigma + sigma.T))
        rows, cols = vech_indices(sigma.shape[0])
        values = factor[rows, cols]
        on_diag = rows == cols
        with np.errstate(divide="ignore"):
            values[on_diag] = np.log(values[on_diag])
        return cls(beta_a_arr, np.asarray(beta_b, dtype=float), values)

    def to_vector(self) -> np.ndarray:
        """
        Unconstrained parameter vector (beta_A, beta_B, chol_log)
        """
        return np.concatenate([self.beta_a, self.beta_b, self.chol_log])

    @classmethod
    def from_vector(cls, theta: np.ndarray, p_a: int, p_b: int) -> "MemParams":
        theta = np.asarray(theta, dtype=float).ravel()
        p_c = p_a * (p_a + 1) // 2
        if theta.size != p_a + p_b + p_c:
            raise PreconditionError(f"expected {p_a + p_b + p_c} parameters, got {theta.size}")
        return cls(theta[:p_a], theta[p_a : p_a + p_b], theta[p_a + p_b :])

    def with_sigma(self, sigma: np.ndarray) -> "MemParams":
        return MemParams.from_sigma(self.beta_a, self.beta_b, sigma)

    def export_to_dict(self) -> Dict[str, List]:
        return {
            "beta_a": self.beta_a.tolist(),
            "beta_b": self.beta_b.tolist(),
            "sigma": self.sigma.tolist(),
        }


def linear_predictor(params: MemParams, u: np.ndarray, x_a: np.ndarray, x_b: np.ndarray) -> np.ndarray:
    """
    (beta_A + u)'x_A + beta_B'x_B, row-wise for matrices of covariates
    """
    return np.asarray(x_a, dtype=float) @ (params.beta_a + u) + np.asarray(x_b, dtype=float) @ params.beta_b


def evi(params: MemParams, u: np.ndarray, x_a: np.ndarray, x_b: np.ndarray) -> float:
    """
    Extreme value index exp[(beta_A + u)'x_A + beta_B'x_B]

    :param params: fixed effects (Sigma is not used)
    :param u: random effect of the cluster
    :param x_a: random-slope covariates
    :param x_b: common-slope covariates
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    x_a = np.atleast_1d(np.asarray(x_a, dtype=float))
    x_b = np.asarray(x_b, dtype=float).ravel()
    if u.size != params.p_a or x_a.size != params.p_a or x_b.size != params.p_b:
        raise PreconditionError(
            f"dimension mismatch: u {u.size}, x_a {x_a.size}, x_b {x_b.size} for p_A={params.p_a}, p_B={params.p_b}"
        )
    return float(np.exp(float(linear_predictor(params, u, x_a, x_b))))


@dataclass(frozen=True)
class ThresholdPlan:
    """
    Per-cluster thresholds with their exceedance counts
    """

    omega: Dict[str, float]
    n_j0: Dict[str, int]
    n_0: float

    @property
    def n_clusters(self) -> int:
        return len(self.omega)

    @property
    def n_exceedances(self) -> int:
        return sum(self.n_j0.values())

    def export_to_dict(self) -> Dict:
        return {"thresholds": dict(self.omega), "n_j0": dict(self.n_j0), "n_0": self.n_0}


def effective_counts(data: ClusteredDataset, omega: Mapping[str, float]) -> ThresholdPlan:
    """
    Count the strict exceedances y > omega_j of every cluster

    :param data: clustered dataset
    :param omega: threshold per cluster id
    """
    thresholds: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for c in data:
        if c.cluster_id not in omega:
            raise PreconditionError(f"no threshold for cluster {c.cluster_id}")
        w = float(omega[c.cluster_id])
        if not np.isfinite(w) or w <= 0:
            raise PreconditionError(f"threshold of cluster {c.cluster_id} must be positive, got {w}")
        thresholds[c.cluster_id] = w
        counts[c.cluster_id] = int(np.count_nonzero(c.y > w))
    return ThresholdPlan(thresholds, counts, float(np.mean(list(counts.values()))))


def log_excess(cluster: Cluster, omega: float) -> np.ndarray:
    """
    log(y / omega) for the exceedances of a cluster, in storage order
    """
    exceed = cluster.y > omega
    return np.log(cluster.y[exceed] / omega)


def pooled_hill(data: ClusteredDataset, plan: ThresholdPlan) -> float:
    """
    Mean log-exceedance ratio over all clusters

    :param data: clustered dataset
    :param plan: thresholds built from data
    """
    z = np.concatenate([log_excess(c, plan.omega[c.cluster_id]) for c in data])
    if z.size == 0:
        raise PreconditionError("no exceedance in the whole dataset")
    return float(np.mean(z))
