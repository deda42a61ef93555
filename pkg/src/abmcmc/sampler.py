"""Metropolis-Hastings chains over the reduced coordinates.

Proposals perturb one free coordinate by +-1 (plus a uniform fractional
part on real dimensions), drawn with probability proportional to
min(1, P~(X') / P~(X)) via a mutable sum tree; acceptance corrects with
the exact-or-hybrid state probability and the forward/reverse proposal
terms.  Feasible states are exact posterior draws; infeasible excursions
are allowed (and penalized) to keep the chain irreducible.

Two interchangeable cores implement the hot loop: a compiled extension
(``abmcmc._core``) and a pure-python fallback (``abmcmc._purecore``).
The compiled core is selected at import when available; set
``ABMCMC_PURE_PYTHON=1`` to force the fallback.  Both walk bit-identical
chains from identical seeds.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _purecore
from ._purecore import SumTree
from .basis import BasisReduction, reduce as reduce_basis
from .engine_build import EngineProblem, build_engine_problem, validate_observations_for_engine
from .factors import CalibratedLogRates, FactorizedDistribution, build_factorized, calibrate_multinomial
from .model import AbmSpec, BoundaryConditions, Observation, simulate
from .polyhedron import MixedIntegerPolyhedron, assemble, flatten_point

try:  # compiled hot loop; optional at runtime
    from . import _core as _compiled
except ImportError:  # pragma: no cover - depends on the build environment
    _compiled = None

DEFAULT_INIT_PROPOSAL_CAP = 10_000_000


def available_backends() -> list[str]:
    out = ["pure"]
    if _compiled is not None:
        out.insert(0, "compiled")
    return out


def default_backend() -> str:
    if os.environ.get("ABMCMC_PURE_PYTHON"):
        return "pure"
    return "compiled" if _compiled is not None else "pure"


def make_engine(problem: EngineProblem, backend: str | None = None):
    backend = backend or default_backend()
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled core is not available in this installation")
        return _compiled.Engine(problem)
    if backend == "pure":
        return _purecore.PureEngine(problem)
    raise ValueError(f"unknown backend {backend!r}")


def sumtree_update(tree: SumTree, leaf: int, weight: float) -> None:
    """Set one leaf weight, refreshing the root-to-leaf sums."""
    tree.update(leaf, weight)


def sumtree_draw(tree: SumTree, rng: np.random.Generator) -> int:
    """Draw a leaf with probability proportional to its weight."""
    return tree.draw(rng)


@dataclass(frozen=True)
class Perturbation:
    """One candidate move: coordinate, unit direction, fractional part."""

    index: int
    direction: int
    fractional: float = 0.0


@dataclass(frozen=True)
class ChainConfig:
    """Per-chain sampling parameters."""

    temperature: float = 0.1
    burn_in: int = 0
    samples: int = 0
    thinning: int = 1
    seed: int | np.random.SeedSequence | None = None
    record_infeasible: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.burn_in < 0 or self.samples < 0 or self.thinning < 1:
            raise ValueError("counts must be non-negative and thinning >= 1")


@dataclass
class SamplingProblem:
    """Everything one chain needs, built once and shared read-only."""

    spec: AbmSpec
    bc: BoundaryConditions
    observations: list[Observation]
    polyhedron: MixedIntegerPolyhedron
    reduction: BasisReduction
    rates: CalibratedLogRates
    fd: FactorizedDistribution
    engine_problem: EngineProblem


def compile_problem(
    spec: AbmSpec,
    bc: BoundaryConditions,
    observations: Sequence[Observation],
    num_timesteps: int,
    fermionic: bool,
    tau: float,
    calibration_rng: np.random.Generator,
    num_prior_samples: int = 10_000,
    tracker_rows: Sequence = (),
    trajectory_cap: int | None = None,
) -> SamplingProblem:
    """Assemble, reduce and calibrate a model into a ready-to-sample problem."""
    validate_observations_for_engine(observations)
    poly = assemble(spec, bc, observations, num_timesteps, fermionic, trajectory_cap=trajectory_cap)
    reduction = reduce_basis(poly)
    rates = calibrate_multinomial(spec, bc, num_timesteps, num_prior_samples, calibration_rng)
    fd = build_factorized(reduction, rates, tau, bc=bc)
    engine_problem = build_engine_problem(spec, bc, reduction, fd, tracker_rows=tracker_rows)
    return SamplingProblem(
        spec=spec,
        bc=bc,
        observations=list(observations),
        polyhedron=poly,
        reduction=reduction,
        rates=rates,
        fd=fd,
        engine_problem=engine_problem,
    )


def valid_perturbations(
    x_n: np.ndarray, h_n: np.ndarray, integer_mask: np.ndarray
) -> list[tuple[int, int]]:
    """All (index, direction) pairs whose rounded target stays in the box.

    Real dimensions are rounded half-to-even before the unit move; integer
    dimensions are used as-is.
    """
    out = []
    for i in range(len(x_n)):
        base = x_n[i] if integer_mask[i] else float(round(float(x_n[i])))
        for direction in (-1, 1):
            if 0.0 <= base + direction <= h_n[i]:
                out.append((i, direction))
    return out


def propose(engine, rng: np.random.Generator) -> tuple[Perturbation, np.ndarray]:
    """Draw one perturbation from the cached proposal weights (no state change)."""
    total = engine.proposal_total()
    if total <= 0:
        raise RuntimeError("no valid perturbation has positive weight")
    leaf = engine.find_leaf(rng.random() * total)
    i, bit = leaf >> 1, leaf & 1
    direction = 1 if bit else -1
    x = engine.state_vector()
    is_int = engine.integer_mask()
    rounded = x[i] if is_int[i] else float(round(float(x[i])))
    fractional = 0.0 if is_int[i] else float(rng.random() - 0.5)
    x_new = x.copy()
    x_new[i] = rounded + direction + fractional
    return Perturbation(index=i, direction=direction, fractional=fractional), x_new


def acceptance_prob(problem: SamplingProblem, engine, perturbation: Perturbation, backend: str | None = None) -> float:
    """Reference acceptance probability, via a from-scratch engine at the target.

    min(1, [P(X')/P(X)] * [w_rev/w_fwd] * [S(X)/S(X')]), where the w are
    the cached proposal weights (equal to the target-ratio min(1, .) terms
    away from the weight floor).
    """
    x = engine.state_vector()
    is_int = engine.integer_mask()
    i, d = perturbation.index, perturbation.direction
    rounded = x[i] if is_int[i] else float(round(float(x[i])))
    x_new = x.copy()
    x_new[i] = rounded + d + perturbation.fractional
    bit = 1 if d == 1 else 0
    w_fwd = engine.weights()[2 * i + bit]
    prime = make_engine(problem.engine_problem, backend)
    prime.set_state(x_new)
    w_rev = prime.weights()[2 * i + (1 - bit)]
    if w_fwd <= 0 or w_rev <= 0:
        return 0.0
    log_ratio = (
        prime.log_prob()
        - engine.log_prob()
        + math.log(w_rev)
        - math.log(w_fwd)
        + math.log(engine.proposal_total())
        - math.log(prime.proposal_total())
    )
    return min(1.0, math.exp(min(log_ratio, 0.0)))


def step(engine, rng: np.random.Generator) -> tuple[bool, bool]:
    """One propose/accept transition; returns (accepted, feasible-after)."""
    return engine.step(rng)


def initialize(
    problem: SamplingProblem,
    rng: np.random.Generator,
    max_proposals: int = DEFAULT_INIT_PROPOSAL_CAP,
    backend: str | None = None,
):
    """Prior trajectory -> free coordinates -> accept-all walk to feasibility.

    Returns (engine, proposals_used).  Raises when no feasible state is
    reached within ``max_proposals``.
    """
    spec, bc = problem.spec, problem.bc
    traj = simulate(spec, bc, problem.reduction.indexer.num_timesteps, rng)
    x_full = flatten_point(traj, problem.polyhedron)
    x0 = x_full[problem.reduction.nonbasic_indices].astype(np.float64)
    engine = make_engine(problem.engine_problem, backend)
    engine.set_state(x0)
    used = engine.seek_feasible(rng, max_proposals)
    return engine, used


@dataclass
class ChainResult:
    """Post-burn-in output of one chain."""

    stat_trace: np.ndarray  # (recorded, n_trackers)
    samples: list[np.ndarray] = field(default_factory=list)
    steps: int = 0
    accepted: int = 0
    infeasible_steps: int = 0
    recorded: int = 0
    init_proposals: int = 0
    elapsed_seconds: float = 0.0
    seed: object = None

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.steps if self.steps else float("nan")

    @property
    def infeasible_fraction(self) -> float:
        return self.infeasible_steps / self.steps if self.steps else float("nan")

    @property
    def feasible_samples_per_second(self) -> float:
        return self.recorded / self.elapsed_seconds if self.elapsed_seconds > 0 else float("nan")

    def stats(self) -> dict:
        return {
            "steps": self.steps,
            "accepted": self.accepted,
            "acceptance_rate": self.acceptance_rate,
            "infeasible_fraction": self.infeasible_fraction,
            "recorded": self.recorded,
            "feasible_samples_per_second": self.feasible_samples_per_second,
            "init_proposals": self.init_proposals,
            "seed": repr(self.seed),
        }


def run_chain(
    problem: SamplingProblem,
    config: ChainConfig,
    backend: str | None = None,
    collect_lifted: bool = False,
    collector: Callable[[np.ndarray], None] | None = None,
    target_records: int = 0,
    max_steps: int | None = None,
) -> ChainResult:
    """Initialize, burn in and sample one chain.

    Records tracker statistics (and, optionally, lifted sample vectors)
    at every ``thinning``-th step while the state is feasible.  With
    ``target_records`` the chain runs until that many records were taken
    (bounded by ``max_steps``); otherwise for ``config.samples`` steps.
    """
    rng = np.random.default_rng(config.seed)
    engine, init_used = initialize(problem, rng, backend=backend)
    if config.burn_in:
        engine.run(rng, config.burn_in)

    samples: list[np.ndarray] = []
    sink = collector
    if collect_lifted:
        def sink(x_full, _samples=samples, _prev=collector):
            _samples.append(np.array(x_full, copy=True))
            if _prev is not None:
                _prev(x_full)

    steps_budget = max_steps if target_records else config.samples
    if steps_budget is None:
        steps_budget = config.samples
    n_records_cap = steps_budget // config.thinning + 1
    n_tr = problem.engine_problem.n_trackers
    stats_buf = np.zeros((max(n_records_cap, 1), max(n_tr, 1)), dtype=np.float64)

    t0 = time.perf_counter()
    out = engine.run(
        rng,
        steps_budget,
        record_stride=config.thinning,
        stats_out=stats_buf if n_tr else None,
        collector=sink,
        record_infeasible=config.record_infeasible,
        target_records=target_records,
    )
    elapsed = time.perf_counter() - t0

    return ChainResult(
        stat_trace=stats_buf[: out["recorded"], :n_tr].copy() if n_tr else np.zeros((out["recorded"], 0)),
        samples=samples,
        steps=out["steps"],
        accepted=out["accepted"],
        infeasible_steps=out["infeasible_steps"],
        recorded=out["recorded"],
        init_proposals=init_used,
        elapsed_seconds=elapsed,
        seed=config.seed,
    )
