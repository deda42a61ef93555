"""Finite-state agent-based models as trajectory tensors.

A model is a set of agent states and actions, an agent timestep
``pi(psi, occupancy, a)`` giving the probability that an agent in state
``psi`` performs action ``a``, and an action tensor ``F`` mapping each
(state, action) pair to the occupancy delta it produces.  A trajectory
counts, for every timestep, how many agents in each state performed each
action; forward simulation, the forecast density and the observation
posterior are all defined over these count tensors.

All probabilities are handled in log domain; impossible events are an
explicit ``-inf``, never an underflowed float.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

NEG_INF = float("-inf")

# Tolerance on sum(pi) == 1 for a reachable (state, occupancy) context.
PI_NORMALIZATION_TOL = 1e-9


class EnumerationLimitExceeded(RuntimeError):
    """Raised when brute-force enumeration would expand too many nodes."""


class NonNormalizedTimestep(RuntimeError):
    """Raised when the agent timestep does not sum to 1 for a reachable context."""


@dataclass(frozen=True)
class AbmSpec:
    """A finite-state, parallel-update agent-based model.

    ``agent_timestep(psi, occupancy, a)`` must accept any integer occupancy
    vector (including vectors that are not reachable by forward simulation;
    the sampler evaluates it on perturbed trajectories).

    ``influence`` optionally lists, for a state ``psi``, the states whose
    occupancy ``agent_timestep(psi, ...)`` may read.  ``None`` means
    "unknown": evaluators then assume every state may matter.
    """

    num_states: int
    num_actions: int
    agent_timestep: Callable[[int, np.ndarray, int], float]
    action_tensor: np.ndarray  # (S, A, S) non-negative integers
    influence: Callable[[int], Sequence[int]] | None = None
    action_support_provider: Callable[[int, int], list] | None = None

    def __post_init__(self):
        F = np.asarray(self.action_tensor, dtype=np.int64)
        if F.shape != (self.num_states, self.num_actions, self.num_states):
            raise ValueError(f"action tensor shape {F.shape} != (S, A, S)")
        if (F < 0).any():
            raise ValueError("action tensor entries must be non-negative")
        object.__setattr__(self, "action_tensor", F)


@dataclass(frozen=True)
class Trajectory:
    """An N x S x A tensor of non-negative integer action counts."""

    tensor: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.tensor)
        if T.ndim != 3:
            raise ValueError("trajectory tensor must be 3-dimensional (t, psi, a)")
        if not np.issubdtype(T.dtype, np.integer):
            if not np.all(T == np.floor(T)):
                raise ValueError("trajectory entries must be integral")
            T = T.astype(np.int64)
        else:
            T = T.astype(np.int64)
        if (T < 0).any():
            raise ValueError("trajectory entries must be non-negative")
        T.setflags(write=False)
        object.__setattr__(self, "tensor", T)

    @property
    def num_timesteps(self) -> int:
        return self.tensor.shape[0]

    def row_sums(self, t: int) -> np.ndarray:
        """Occupancy implied by the actors of timestep ``t`` (sum over actions)."""
        return self.tensor[t].sum(axis=1)

    def key(self) -> bytes:
        """Hashable identity, used for tallying enumeration/sampling output."""
        return self.tensor.tobytes()

    def to_csv(self) -> str:
        """Serialize as ``t,psi,a,count`` rows; zero entries omitted."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "psi", "a", "count"])
        for t, psi, a in zip(*np.nonzero(self.tensor)):
            w.writerow([int(t), int(psi), int(a), int(self.tensor[t, psi, a])])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str, num_timesteps: int, num_states: int, num_actions: int) -> "Trajectory":
        T = np.zeros((num_timesteps, num_states, num_actions), dtype=np.int64)
        rows = csv.reader(io.StringIO(text))
        header = next(rows)
        if header != ["t", "psi", "a", "count"]:
            raise ValueError(f"unexpected trajectory CSV header: {header}")
        for row in rows:
            if not row:
                continue
            t, psi, a, count = (int(v) for v in row)
            T[t, psi, a] = count
        return Trajectory(T)


def occupancy_csv(spec: AbmSpec, traj: Trajectory, bc: "BoundaryConditions") -> str:
    """Dump per-timestep occupancy as ``t,psi,count`` rows (t = 0..N)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "psi", "count"])
    for t in range(traj.num_timesteps + 1):
        occ = traj.row_sums(t) if t < traj.num_timesteps else state_after(spec, traj, bc, t)
        for psi in range(spec.num_states):
            w.writerow([t, psi, int(occ[psi])])
    return buf.getvalue()


@dataclass(frozen=True)
class BoundaryConditions:
    """Start-state distribution plus deterministic per-timestep injections.

    The realized start occupancy of a trajectory is ``rows(T^0) - I^0``,
    i.e. injections at t=0 are a deterministic baseline and the random
    start sits on top of it.  Models with a purely deterministic start
    encode it in ``injections[0]`` and use a point-mass start distribution.

    ``start_state_support`` receives a constraint-building context (see
    ``polyhedron.StartSupportContext``) and returns linear constraints
    bounding the support of the start distribution.

    ``start_state_approx_log_prob`` is an everywhere-finite stand-in used
    when the exact start probability is zero on a perturbed state; models
    may omit it (contribution then defaults to 0).
    """

    start_state_log_prob: Callable[[np.ndarray], float]
    start_state_sampler: Callable[[np.random.Generator], np.ndarray]
    start_state_support: Callable | None = None
    injections: Mapping[int, np.ndarray] = field(default_factory=dict)
    start_state_enumerator: Callable[[], Iterable[np.ndarray]] | None = None
    start_state_approx_log_prob: Callable[[np.ndarray], float] | None = None
    # Per-state log-odds slope of the start distribution, used to shape
    # proposals (occupancy-factorizable starts only; None to omit).
    start_state_tilt: np.ndarray | None = None

    def injection(self, t: int, num_states: int) -> np.ndarray:
        vec = self.injections.get(t)
        if vec is None:
            return np.zeros(num_states, dtype=np.int64)
        return np.asarray(vec, dtype=np.int64)


@dataclass(frozen=True)
class Observation:
    """A stochastic observation operator paired with its observed value.

    ``log_likelihood(traj)`` is ``log P(omega(T) = v)`` and must be ``-inf``
    for any trajectory outside the support described by ``support``.
    ``support(ctx)`` returns linear constraints bounding that support (see
    ``polyhedron.SupportContext``).
    """

    log_likelihood: Callable[[Trajectory], float]
    support: Callable
    kind: str = "generic"
    meta: dict = field(default_factory=dict)


def apply_actions(spec: AbmSpec, timestep_counts: np.ndarray) -> np.ndarray:
    """Occupancy produced by one timestep's action counts (sparse in practice)."""
    out = np.zeros(spec.num_states, dtype=np.int64)
    for psi, a in zip(*np.nonzero(timestep_counts)):
        out += timestep_counts[psi, a] * spec.action_tensor[psi, a]
    return out


def state_after(spec: AbmSpec, traj: Trajectory, bc: BoundaryConditions, t: int) -> np.ndarray:
    """Occupancy produced by the actions of timestep t-1 plus injections I^t.

    For ``t == 0`` this is the injected (deterministic) part of the start
    state only; a random start drawn on top of it is visible through the
    row sums of ``T^0`` instead.
    """
    if not 0 <= t <= traj.num_timesteps:
        raise ValueError(f"timestep {t} outside 0..{traj.num_timesteps}")
    if t == 0:
        return bc.injection(0, spec.num_states)
    return apply_actions(spec, traj.tensor[t - 1]) + bc.injection(t, spec.num_states)


def is_continuous(spec: AbmSpec, traj: Trajectory, bc: BoundaryConditions) -> bool:
    """Check the conservation law tying each timestep's actors to the last.

    At t=0 the actors must cover the injections (the remainder is the
    random start state and only needs to be non-negative); at t >= 1 the
    row sums must exactly equal the occupancy produced by t-1.
    """
    start = traj.row_sums(0) - bc.injection(0, spec.num_states)
    if (start < 0).any():
        return False
    for t in range(1, traj.num_timesteps):
        if not np.array_equal(state_after(spec, traj, bc, t), traj.row_sums(t)):
            return False
    return True


def _action_probs(spec: AbmSpec, psi: int, occupancy: np.ndarray) -> np.ndarray:
    probs = np.array(
        [spec.agent_timestep(psi, occupancy, a) for a in range(spec.num_actions)],
        dtype=float,
    )
    if abs(probs.sum() - 1.0) > PI_NORMALIZATION_TOL:
        raise NonNormalizedTimestep(
            f"agent timestep sums to {probs.sum():.12f} for state {psi}, occupancy {occupancy}"
        )
    return probs


def simulate(spec: AbmSpec, bc: BoundaryConditions, num_timesteps: int, rng: np.random.Generator) -> Trajectory:
    """Draw a trajectory from the model forecast.

    Each occupied state draws its action counts from the multinomial with
    probabilities ``agent_timestep(psi, occupancy, .)``.
    """
    if num_timesteps < 1:
        raise ValueError("num_timesteps must be >= 1")
    S, A = spec.num_states, spec.num_actions
    T = np.zeros((num_timesteps, S, A), dtype=np.int64)
    occupancy = np.asarray(bc.start_state_sampler(rng), dtype=np.int64) + bc.injection(0, S)
    for t in range(num_timesteps):
        for psi in np.nonzero(occupancy)[0]:
            probs = _action_probs(spec, int(psi), occupancy)
            T[t, psi] = rng.multinomial(int(occupancy[psi]), probs)
        occupancy = apply_actions(spec, T[t]) + bc.injection(t + 1, S)
    return Trajectory(T)


def forecast_log_prob(spec: AbmSpec, traj: Trajectory, bc: BoundaryConditions) -> float:
    """log P(T) under the model forecast; -inf outside the trajectory set.

    The value is the start-state log probability plus one multinomial term
    per (timestep, occupied state):

        log(n!) + sum_a [ c_a log pi(psi, occupancy, a) - log(c_a!) ]
    """
    if not is_continuous(spec, traj, bc):
        return NEG_INF
    start = traj.row_sums(0) - bc.injection(0, spec.num_states)
    total = float(bc.start_state_log_prob(start))
    if total == NEG_INF or math.isnan(total):
        return NEG_INF
    for t in range(traj.num_timesteps):
        occupancy = traj.row_sums(t)
        for psi in np.nonzero(occupancy)[0]:
            counts = traj.tensor[t, psi]
            total += math.lgamma(float(occupancy[psi]) + 1.0)
            for a in np.nonzero(counts)[0]:
                p = spec.agent_timestep(int(psi), occupancy, int(a))
                if p <= 0.0:
                    return NEG_INF
                c = float(counts[a])
                total += c * math.log(p) - math.lgamma(c + 1.0)
    return total


def posterior_log_prob(
    spec: AbmSpec,
    traj: Trajectory,
    observations: Sequence[Observation],
    bc: BoundaryConditions,
) -> float:
    """Forecast log-probability plus observation log-likelihoods."""
    total = forecast_log_prob(spec, traj, bc)
    for obs in observations:
        if total == NEG_INF:
            return NEG_INF
        total += float(obs.log_likelihood(traj))
    return total


def _compositions(n: int, k: int, cap: int | None):
    """All length-k non-negative integer vectors summing to n (entries <= cap)."""
    if k == 1:
        if cap is None or n <= cap:
            yield (n,)
        return
    top = n if cap is None else min(n, cap)
    for first in range(top, -1, -1):
        for rest in _compositions(n - first, k - 1, cap):
            yield (first,) + rest


def enumerate_posterior(
    spec: AbmSpec,
    bc: BoundaryConditions,
    observations: Sequence[Observation],
    num_timesteps: int,
    fermionic: bool,
    ceiling: int = 10_000_000,
) -> list[tuple[Trajectory, float]]:
    """Brute-force the posterior over all continuous integral trajectories.

    Enumerates every (optionally Fermionic) trajectory whose used actions
    all have non-zero probability, keeps those with non-zero posterior and
    returns them with normalized probabilities.  Raises
    ``EnumerationLimitExceeded`` once more than ``ceiling`` enumeration
    nodes have been expanded; intended as a test oracle for small models.
    """
    if bc.start_state_enumerator is None:
        raise ValueError("enumeration requires bc.start_state_enumerator")
    S, A = spec.num_states, spec.num_actions
    cap = 1 if fermionic else None
    nodes = 0
    results: list[tuple[Trajectory, float]] = []

    def timestep_options(occupancy: np.ndarray) -> list[list[np.ndarray]] | None:
        """Per-state admissible action-count vectors, or None if a state is stuck."""
        per_state = []
        for psi in range(S):
            n = int(occupancy[psi])
            if n == 0:
                continue
            probs = [spec.agent_timestep(psi, occupancy, a) for a in range(A)]
            opts = []
            for combo in _compositions(n, A, cap):
                if all(c == 0 or probs[a] > 0.0 for a, c in enumerate(combo)):
                    opts.append((psi, np.array(combo, dtype=np.int64)))
            if not opts:
                return None
            per_state.append(opts)
        return per_state

    def recurse(t: int, occupancy: np.ndarray, steps: list[np.ndarray]):
        nonlocal nodes
        if t == num_timesteps:
            traj = Trajectory(np.stack(steps) if steps else np.zeros((0, S, A), dtype=np.int64))
            lp = posterior_log_prob(spec, traj, observations, bc)
            if lp > NEG_INF:
                results.append((traj, lp))
            return
        per_state = timestep_options(occupancy)
        if per_state is None:
            return
        for assignment in itertools.product(*per_state) if per_state else [()]:
            nodes += 1
            if nodes > ceiling:
                raise EnumerationLimitExceeded(f"more than {ceiling} enumeration nodes")
            E = np.zeros((S, A), dtype=np.int64)
            for psi, combo in assignment:
                E[psi] = combo
            nxt = apply_actions(spec, E) + bc.injection(t + 1, S)
            recurse(t + 1, nxt, steps + [E])

    inj0 = bc.injection(0, S)
    for start in bc.start_state_enumerator():
        start = np.asarray(start, dtype=np.int64)
        recurse(0, start + inj0, [])

    if not results:
        return []
    log_probs = np.array([lp for _, lp in results])
    probs = np.exp(log_probs - log_probs.max())
    probs /= probs.sum()
    return [(traj, float(p)) for (traj, _), p in zip(results, probs)]
