"""Convergence diagnostics over chain summary-statistic sequences.

Given m equal-length sequences of one scalar statistic, computes the
between/within variance decomposition, the Gelman-Rubin shrink factor
R-hat, lag autocorrelations estimated from pooled mean squared lag
differences, and the effective sample count

    n_e = m*n / (1 + 2 * sum_t rho_t)

where the sum starts at lag 0 and stops at the first non-positive
autocorrelation.  Note the lag-0 term is included, matching the
convention used throughout this package's reports (this differs from the
common t >= 1 convention; see README).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import AbmSpec, BoundaryConditions, Trajectory, state_after


class DegenerateSequencesError(ValueError):
    """Variance-based diagnostics are undefined on constant sequences."""


def _as_matrix(sequences: Sequence[np.ndarray]) -> np.ndarray:
    seqs = [np.asarray(s, dtype=float) for s in sequences]
    if len(seqs) < 2:
        raise ValueError("need at least two sequences")
    n = len(seqs[0])
    if n < 2:
        raise ValueError("sequences must have length >= 2")
    if any(len(s) != n for s in seqs):
        raise ValueError("sequences must share one length")
    return np.stack(seqs)


def within_variance(sequences: Sequence[np.ndarray]) -> float:
    x = _as_matrix(sequences)
    return float(np.mean(np.var(x, axis=1, ddof=1)))


def between_variance(sequences: Sequence[np.ndarray]) -> float:
    x = _as_matrix(sequences)
    n = x.shape[1]
    return float(n * np.var(np.mean(x, axis=1), ddof=1))


def pooled_variance_estimate(sequences: Sequence[np.ndarray]) -> float:
    """The weighted within/between combination that overestimates the variance."""
    x = _as_matrix(sequences)
    n = x.shape[1]
    return (n - 1) / n * within_variance(sequences) + between_variance(sequences) / n


def gelman_rubin(sequences: Sequence[np.ndarray]) -> float:
    """Shrink factor R-hat = sqrt(pooled variance / within variance)."""
    w = within_variance(sequences)
    if w == 0.0:
        raise DegenerateSequencesError("within-sequence variance is zero")
    return math.sqrt(pooled_variance_estimate(sequences) / w)


def _lag_vt(x: np.ndarray, t: int) -> np.ndarray:
    """Per-sequence mean squared lag-t difference; (m,) vector."""
    n = x.shape[1]
    if t == 0:
        return np.zeros(x.shape[0])
    d = x[:, : n - t] - x[:, t:]
    return (d * d).sum(axis=1) / (n - t)


def autocorrelation(sequences: Sequence[np.ndarray], lag: int) -> float:
    """rho_t = 1 - V_t / (2 var+), with V_t pooled across sequences."""
    x = _as_matrix(sequences)
    n = x.shape[1]
    if not 0 <= lag < n:
        raise ValueError(f"lag {lag} outside 0..{n - 1}")
    var_plus = pooled_variance_estimate(sequences)
    if var_plus == 0.0:
        raise DegenerateSequencesError("pooled variance is zero")
    v_t = float(np.mean(_lag_vt(x, lag)))
    return 1.0 - v_t / (2.0 * var_plus)


def autocorrelation_curve(sequences: Sequence[np.ndarray], lags: Sequence[int]) -> np.ndarray:
    return np.array([autocorrelation(sequences, t) for t in lags])


def effective_samples(sequences: Sequence[np.ndarray], max_lag: int | None = None) -> float:
    """m*n / (1 + 2 * sum of leading positive autocorrelations, lag 0 up)."""
    x = _as_matrix(sequences)
    m, n = x.shape
    var_plus = pooled_variance_estimate(sequences)
    if var_plus == 0.0:
        raise DegenerateSequencesError("pooled variance is zero")
    limit = n if max_lag is None else min(max_lag + 1, n)
    rho_sum = 0.0
    for t in range(limit):
        rho = 1.0 - float(np.mean(_lag_vt(x, t))) / (2.0 * var_plus)
        if rho <= 0.0:
            break
        rho_sum += rho
    return m * n / (1.0 + 2.0 * rho_sum)


@dataclass(frozen=True)
class RegionSet:
    """Groups of agent states whose total final occupancy is a summary statistic."""

    regions: tuple
    labels: tuple

    @staticmethod
    def from_state_groups(groups: Sequence[np.ndarray], labels: Sequence[str] | None = None) -> "RegionSet":
        regions = tuple(np.asarray(g, dtype=np.int64) for g in groups)
        if labels is None:
            labels = tuple(f"statistic_{i + 1}" for i in range(len(regions)))
        return RegionSet(regions=regions, labels=tuple(labels))

    def __len__(self) -> int:
        return len(self.regions)


def summary_statistics(
    spec: AbmSpec, bc: BoundaryConditions, sample: Trajectory, regions: RegionSet
) -> np.ndarray:
    """Total agents inside each region at the occupancy after the last timestep."""
    final = state_after(spec, sample, bc, sample.num_timesteps)
    return np.array([float(final[r].sum()) for r in regions.regions])


def occupancy_expectation(final_occupancies: Sequence[np.ndarray]) -> np.ndarray:
    """Mean agent count per state at the final timestep over posterior samples."""
    occs = [np.asarray(o, dtype=float) for o in final_occupancies]
    if not occs:
        raise ValueError("need at least one sample")
    return np.mean(np.stack(occs), axis=0)
