"""Linearly factorized target approximation and Markov-state probability.

The proposal distribution is a product of univariate factors of affine
forms of the free coordinates X_N: one Boltzmann factor exp(-iota/tau)
per linear constraint (iota = distance outside the constraint interval),
plus a per-cell factorization of the multinomial timestep terms using
prior-calibrated per-action log rates.  Outside a factor's domain the
factor takes its value at the nearest domain point, so the product is
finite everywhere on the box.

The probability the Markov chain actually targets is exact on feasible
states (it *is* the posterior there) and degrades factor-by-factor on
infeasible ones: each posterior factor that is undefined or zero at the
lifted point is replaced by its factorized stand-in, and all constraint
Boltzmann factors are applied on top.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .basis import BasisReduction, basic_box_constraints, compose_over_nonbasic, lift
from .model import AbmSpec, BoundaryConditions, NEG_INF, Observation, Trajectory, posterior_log_prob, simulate
from .polyhedron import LinearConstraint

DEFAULT_RATE_FLOOR = math.log(1e-6)
DEFAULT_PRIOR_SAMPLES = 10_000


def infeasibility(lower: float, x: float, upper: float) -> float:
    """Distance from x to the interval [lower, upper]; 0 inside."""
    if x > upper:
        return x - upper
    if x < lower:
        return lower - x
    return 0.0


@dataclass(frozen=True)
class Factor:
    """One univariate factor: log value of an affine form of X_N.

    ``row``/``offset`` define the argument; ``eval_log`` maps an argument
    to a finite log value (clamping to ``domain`` internally); ``kind``
    and ``params`` expose the closed-form description the compiled
    sampler core consumes.
    """

    row: dict[int, Fraction]
    offset: Fraction
    eval_log: Callable[[float], float]
    domain: tuple[float, float]
    kind: str
    params: tuple[float, ...]

    def argument(self, x_n: Sequence[float]) -> float:
        return float(self.offset) + sum(float(c) * float(x_n[p]) for p, c in self.row.items())


@dataclass
class FactorizedDistribution:
    """Product of univariate factors, indexed by the variables they touch."""

    factors: list[Factor]
    tau: float
    touch_index: dict[int, list[int]] = field(default_factory=dict)
    cell_index: "CellFactorIndex | None" = None

    def __post_init__(self):
        if not self.touch_index:
            touch: dict[int, list[int]] = {}
            for fid, f in enumerate(self.factors):
                for p in f.row:
                    touch.setdefault(p, []).append(fid)
            self.touch_index = touch


@dataclass(frozen=True)
class CalibratedLogRates:
    """Per (t, psi, a) log action rates estimated from prior simulations.

    Cells never visited by a prior sample take the configured floor so the
    factorized target stays finite (and unvisited actions stay strongly
    discouraged rather than impossible).
    """

    log_rates: np.ndarray  # (N, S, A)
    floor: float
    visited: np.ndarray  # (N, S, A) bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "psi", "a", "log_pi_tilde"])
        N, S, A = self.log_rates.shape
        for t in range(N):
            for psi in range(S):
                for a in range(A):
                    w.writerow([t, psi, a, repr(float(self.log_rates[t, psi, a]))])
        return buf.getvalue()


def calibrate_multinomial(
    spec: AbmSpec,
    bc: BoundaryConditions,
    num_timesteps: int,
    num_prior_samples: int,
    rng: np.random.Generator,
    floor: float = DEFAULT_RATE_FLOOR,
) -> CalibratedLogRates:
    """Monte Carlo estimate of count-weighted mean log action probabilities.

    For each (t, psi, a):  sum over prior draws of T * log pi(psi, occ, a)
    divided by the summed counts; cells with zero summed count get the
    floor value.
    """
    if num_prior_samples < 1:
        raise ValueError("need at least one prior sample")
    S, A = spec.num_states, spec.num_actions
    num = np.zeros((num_timesteps, S, A))
    den = np.zeros((num_timesteps, S, A))
    for _ in range(num_prior_samples):
        traj = simulate(spec, bc, num_timesteps, rng)
        for t in range(num_timesteps):
            occ = traj.row_sums(t)
            for psi in np.nonzero(occ)[0]:
                counts = traj.tensor[t, psi]
                for a in np.nonzero(counts)[0]:
                    c = float(counts[a])
                    num[t, psi, a] += c * math.log(spec.agent_timestep(int(psi), occ, int(a)))
                    den[t, psi, a] += c
    visited = den > 0
    log_rates = np.full((num_timesteps, S, A), floor, dtype=float)
    np.divide(num, den, out=log_rates, where=visited)
    return CalibratedLogRates(log_rates=log_rates, floor=floor, visited=visited)


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def constraint_factors(constraints: Sequence[LinearConstraint], tau: float) -> list[Factor]:
    """One Boltzmann factor exp(-iota/tau) per constraint row."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    inv_tau = 1.0 / tau
    out = []
    for c in constraints:
        lo = NEG_INF if c.lower is None else float(c.lower)
        hi = math.inf if c.upper is None else float(c.upper)

        def eval_log(x: float, lo=lo, hi=hi, inv_tau=inv_tau) -> float:
            return -infeasibility(lo, x, hi) * inv_tau

        out.append(
            Factor(
                row=dict(c.coeffs),
                offset=Fraction(0),
                eval_log=eval_log,
                domain=(NEG_INF, math.inf),
                kind="constraint",
                params=(lo, hi, inv_tau),
            )
        )
    return out


def count_action_log(x: float, log_rate: float, hi: float) -> float:
    """T * log(pi~) - log(T!) at the clamped count."""
    xc = _clamp(x, 0.0, hi)
    return xc * log_rate - math.lgamma(xc + 1.0)


def count_rowsum_log(x: float, hi: float) -> float:
    """log(n!) at the clamped row sum."""
    xc = _clamp(x, 0.0, hi)
    return math.lgamma(xc + 1.0)


def multinomial_factors(rates: CalibratedLogRates, reduction: BasisReduction) -> list[Factor]:
    """Per-cell factorization of the multinomial timestep terms over X_N.

    Emits, cell-major, one row-sum factor log(n!) per (t, psi) followed by
    one factor T*log(pi~) - log(T!) per action, each expressed over the
    free coordinates through the lift map.  Count factors are exact on
    [0, H] and clamp outside.
    """
    idx = reduction.indexer
    N, S, A = rates.log_rates.shape
    if (N, S, A) != (idx.num_timesteps, idx.num_states, idx.num_actions):
        raise ValueError("rates shape does not match the reduction's model dimensions")
    out: list[Factor] = []
    box = reduction.polyhedron.box
    for t in range(N):
        for psi in range(S):
            dims = [idx.flatten(t, psi, a) for a in range(A)]
            h_sum = float(sum(box[d] for d in dims))
            row, offset = compose_over_nonbasic(reduction, {d: Fraction(1) for d in dims})
            out.append(
                Factor(
                    row=row,
                    offset=offset,
                    eval_log=lambda x, hi=h_sum: count_rowsum_log(x, hi),
                    domain=(0.0, h_sum),
                    kind="count_rowsum",
                    params=(h_sum,),
                )
            )
            for a in range(A):
                d = dims[a]
                h = float(box[d])
                lr = float(rates.log_rates[t, psi, a])
                row, offset = compose_over_nonbasic(reduction, {d: Fraction(1)})
                out.append(
                    Factor(
                        row=row,
                        offset=offset,
                        eval_log=lambda x, lr=lr, hi=h: count_action_log(x, lr, hi),
                        domain=(0.0, h),
                        kind="count_action",
                        params=(lr, h),
                    )
                )
    return out


@dataclass(frozen=True)
class CellFactorIndex:
    """Positions of the per-cell multinomial factors inside a factor list."""

    rowsum_fid: np.ndarray  # (N*S,) int32
    action_fid: np.ndarray  # (N*S*A,) int32


def start_factors(bc: BoundaryConditions, reduction: BasisReduction) -> list[Factor]:
    """Per-state affine tilt of the start distribution, over X_N.

    For start distributions that factorize over state occupancies with
    log-odds slope ``tilt[psi]`` (e.g. independent per-state occupancy
    draws), the factor slope * clamp(occupancy, 0, H) reproduces the start
    density up to a constant.  Models without ``start_state_tilt``
    contribute none.
    """
    if bc.start_state_tilt is None:
        return []
    idx = reduction.indexer
    S, A = idx.num_states, idx.num_actions
    inj0 = bc.injection(0, S)
    box = reduction.polyhedron.box
    out: list[Factor] = []
    for psi in range(S):
        slope = float(bc.start_state_tilt[psi])
        if slope == 0.0:
            continue
        dims = [idx.flatten(0, psi, a) for a in range(A)]
        hi = float(sum(box[d] for d in dims)) - float(inj0[psi])
        row, offset = compose_over_nonbasic(
            reduction, {d: Fraction(1) for d in dims}, Fraction(-int(inj0[psi]))
        )
        out.append(
            Factor(
                row=row,
                offset=offset,
                eval_log=lambda x, s=slope, h=hi: s * _clamp(x, 0.0, h),
                domain=(0.0, hi),
                kind="affine",
                params=(slope, 0.0, hi),
            )
        )
    return out


def build_factorized(
    reduction: BasisReduction,
    rates: CalibratedLogRates,
    tau: float,
    bc: BoundaryConditions | None = None,
) -> FactorizedDistribution:
    """Assemble the full proposal target over X_N.

    Constraint factors cover the reduced inequality system plus the box
    bounds of the eliminated (basic) dimensions (eliminated equalities
    hold identically under the lift and need no factor); multinomial
    factors approximate the timestep terms; start-state tilt factors are
    appended when the boundary conditions provide one.
    """
    constraints = list(reduction.reduced_constraints) + basic_box_constraints(reduction)
    cfs = constraint_factors(constraints, tau)
    mfs = multinomial_factors(rates, reduction)
    sfs = start_factors(bc, reduction) if bc is not None else []
    idx = reduction.indexer
    N, S, A = idx.num_timesteps, idx.num_states, idx.num_actions
    base = len(cfs)
    rowsum_fid = np.empty(N * S, dtype=np.int32)
    action_fid = np.empty(N * S * A, dtype=np.int32)
    for c in range(N * S):
        rowsum_fid[c] = base + c * (A + 1)
        for a in range(A):
            action_fid[c * A + a] = base + c * (A + 1) + 1 + a
    return FactorizedDistribution(
        factors=cfs + mfs + sfs,
        tau=tau,
        cell_index=CellFactorIndex(rowsum_fid=rowsum_fid, action_fid=action_fid),
    )


def log_tilde_p(fd: FactorizedDistribution, x_n: Sequence[float]) -> float:
    """Log of the factorized target at X_N; finite everywhere on the box."""
    return sum(f.eval_log(f.argument(x_n)) for f in fd.factors)


def _exact_cell_log(
    spec: AbmSpec, counts: np.ndarray, occupancy: np.ndarray, psi: int
) -> float | None:
    """Exact multinomial term for one (t, psi) cell, or None when undefined/zero."""
    if (counts < 0).any():
        return None
    n = float(counts.sum())
    if n == 0:
        return 0.0
    total = math.lgamma(n + 1.0)
    for a in np.nonzero(counts)[0]:
        p = spec.agent_timestep(psi, occupancy, int(a))
        if p <= 0.0:
            return None
        c = float(counts[a])
        total += c * math.log(p) - math.lgamma(c + 1.0)
    return total


def markov_log_prob(
    spec: AbmSpec,
    bc: BoundaryConditions,
    observations: Sequence[Observation],
    reduction: BasisReduction,
    fd: FactorizedDistribution,
    x_n: Sequence,
) -> tuple[float, bool]:
    """Log probability of a Markov state, exact on feasible states.

    Feasible (all original constraints hold at the exact lift, integral on
    integer dimensions, and the posterior is non-zero): returns the exact
    posterior log probability and True.  Otherwise: per multiplicative
    posterior factor, the exact factor where defined and positive, its
    factorized stand-in where not, plus every constraint's Boltzmann
    penalty; returns that hybrid value and False.
    """
    if fd.cell_index is None:
        raise ValueError("factorized distribution lacks its cell index (use build_factorized)")
    idx = reduction.indexer
    poly = reduction.polyhedron
    exact = lift(reduction, x_n)

    integral = all(
        exact[d].denominator == 1 for d in range(idx.total_dims) if idx.is_integer(d)
    )
    in_box = all(
        exact[d] >= 0 and (poly.box[d] is None or exact[d] <= poly.box[d])
        for d in range(idx.total_dims)
    )
    constraints_ok = in_box and all(c.satisfied_by(exact) for c in poly.constraints)

    if integral and constraints_ok:
        traj = Trajectory(
            np.array([int(v) for v in exact[: idx.num_trajectory_vars]], dtype=np.int64).reshape(
                idx.num_timesteps, idx.num_states, idx.num_actions
            )
        )
        p = posterior_log_prob(spec, traj, observations, bc)
        if p > NEG_INF:
            return p, True

    # Hybrid value on infeasible states, matching the sampler core.
    x_f = np.array([float(v) for v in exact])
    N, S, A = idx.num_timesteps, idx.num_states, idx.num_actions
    traj_block = x_f[: idx.num_trajectory_vars].reshape(N, S, A)
    total = 0.0
    for t in range(N):
        occupancy = traj_block[t].sum(axis=1)
        for psi in range(S):
            counts = traj_block[t, psi]
            if not counts.any():
                continue
            exact_val = _exact_cell_log(spec, counts, occupancy, psi) if integral else None
            if exact_val is not None:
                total += exact_val
            else:
                c = t * S + psi
                fr = fd.factors[int(fd.cell_index.rowsum_fid[c])]
                total += fr.eval_log(float(occupancy[psi]))
                for a in range(A):
                    fa = fd.factors[int(fd.cell_index.action_fid[c * A + a])]
                    total += fa.eval_log(float(counts[a]))

    start_occ = traj_block[0].sum(axis=1) - bc.injection(0, S).astype(float)
    start_val = float(bc.start_state_log_prob(start_occ)) if integral and (start_occ >= 0).all() else NEG_INF
    if start_val == NEG_INF or math.isnan(start_val):
        if bc.start_state_approx_log_prob is not None:
            total += float(bc.start_state_approx_log_prob(start_occ))
    else:
        total += start_val

    # Noiseless observations contribute log(1) = 0 when satisfied and are
    # replaced by their (unit) stand-in when not; their support equalities
    # already carry the Boltzmann penalty below.  Generic observations are
    # evaluated exactly where the trajectory is well-formed.
    for obs in observations:
        if obs.kind == "noiseless_count":
            continue
        if integral and (traj_block >= 0).all():
            traj = Trajectory(traj_block.astype(np.int64))
            v = float(obs.log_likelihood(traj))
            if v > NEG_INF:
                total += v

    # Penalties: every non-equality constraint row (eliminated equalities
    # hold identically under the lift) plus the box bounds of eliminated
    # dimensions.  The box of the free coordinates is enforced by proposal
    # validity, not by a penalty.
    inv_tau = 1.0 / fd.tau
    penalty = 0.0
    for c in poly.constraints:
        val = sum(float(co) * x_f[i] for i, co in c.coeffs.items())
        lo = NEG_INF if c.lower is None else float(c.lower)
        hi = math.inf if c.upper is None else float(c.upper)
        penalty += infeasibility(lo, val, hi)
    for d in reduction.basic_indices:
        hi = math.inf if poly.box[d] is None else float(poly.box[d])
        penalty += infeasibility(0.0, float(x_f[d]), hi)
    total -= penalty * inv_tau
    return total, False
