#!/usr/bin/env python

from dataclasses import dataclass
from typing import (
    Dict,
    List,
    Optional,
)

import numpy as np
import pandas as pd
from model_core import (
    Cluster,
    ClusteredDataset,
    effective_counts,
    PreconditionError,
    ThresholdPlan,
)


@dataclass(frozen=True)
class CandidateLadder:
    k_min: int = 10
    k_max: int = 200
    step: int = 1

    def __post_init__(self) -> None:
        if not 2 <= self.k_min <= self.k_max:
            raise PreconditionError(f"ladder needs 2 <= k_min <= k_max, got {self.k_min}..{self.k_max}")
        if self.step < 1:
            raise PreconditionError("ladder step must be positive")

    def candidates(self, n_obs: int) -> List[int]:
        """
        Ladder truncated so that a (k+1)-th largest response exists
        """
        return list(range(self.k_min, min(self.k_max, n_obs - 1) + 1, self.step))


@dataclass(frozen=True)
class Candidate:
    k: int
    omega: float
    hill: float
    discrepancy: float


def discrepancy(s_values: np.ndarray) -> float:
    """
    Cramer-von Mises distance of a sample to U(0, 1), divided by its size:
    sum_r (S_(r) - (r - 0.5) / k)^2 / k + 1 / (12 k^2)

    :param s_values: sample in (0, 1)
    """
    s = np.sort(np.asarray(s_values, dtype=float))
    k = s.size
    if k == 0:
        raise PreconditionError("empty sample")
    positions = (np.arange(1, k + 1) - 0.5) / k
    return float(np.sum((s - positions) ** 2) / k + 1.0 / (12.0 * k * k))


def _cluster_candidates(cluster: Cluster, ladder: CandidateLadder) -> List[Candidate]:
    y = np.sort(cluster.y)[::-1]
    result = []
    for k in ladder.candidates(y.size):
        omega = float(y[k])
        if y[k - 1] <= omega:
            # ties at the threshold: fewer than k strict exceedances
            continue
        z = np.log(y[:k] / omega)
        hill = float(np.mean(z))
        result.append(Candidate(k, omega, hill, discrepancy(np.exp(-z / hill))))
    return result


def _best(candidates: List[Candidate]) -> Optional[Candidate]:
    best = None
    for c in candidates:
        if best is None or c.discrepancy <= best.discrepancy:
            best = c
    return best


def select_thresholds(data: ClusteredDataset, ladder: CandidateLadder) -> ThresholdPlan:
    """
    Choose the exceedance count of every cluster by minimal discrepancy

    :param data: clustered dataset
    :param ladder: candidate counts
    """
    omega: Dict[str, float] = {}
    for c in data:
        best = _best(_cluster_candidates(c, ladder))
        if best is None:
            raise PreconditionError(
                f"no valid threshold candidate for cluster {c.cluster_id} ({c.n} observations, ladder "
                f"{ladder.k_min}..{ladder.k_max})"
            )
        omega[c.cluster_id] = best.omega
    return effective_counts(data, omega)


def threshold_diagnostics(data: ClusteredDataset, ladder: CandidateLadder) -> pd.DataFrame:
    """
    Every candidate of every cluster with its Hill estimate and discrepancy

    :param data: clustered dataset
    :param ladder: candidate counts
    """
    rows = []
    for c in data:
        candidates = _cluster_candidates(c, ladder)
        best = _best(candidates)
        for cand in candidates:
            rows.append(
                {
                    "cluster": c.cluster_id,
                    "k": cand.k,
                    "omega": cand.omega,
                    "hill": cand.hill,
                    "discrepancy": cand.discrepancy,
                    "selected": best is not None and cand.k == best.k,
                }
            )
    return pd.DataFrame(rows, columns=["cluster", "k", "omega", "hill", "discrepancy", "selected"])
