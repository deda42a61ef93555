"""Mixed-integer polyhedra bounding the support of the trajectory posterior.

The posterior of a finite-state ABM is supported on integral, continuous
trajectories whose start state, observations and used actions all have
non-zero probability.  Each of those conditions is bounded here by linear
constraints over the flattened trajectory vector, and the per-action
support conditions ("this action is possible OR nobody takes it") are
turned from unions into plain inequalities with an indicator-variable
big-M construction; under the one-agent-per-cell assumption the action
count itself serves as the indicator and no auxiliary variable is needed.

Constraint coefficients and bounds are exact rationals throughout: the
downstream basis reduction relies on exact divisibility tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import AbmSpec, BoundaryConditions, Observation, Trajectory, state_after

Rational = Fraction | int


class UnboundedConstraintError(ValueError):
    """A constraint touches a variable with no finite box bound."""


class VariableIndexer:
    """Flat index space: trajectory cells, then parameters, then indicators.

    Trajectory variable (t, psi, a) maps to ``(t*S + psi)*A + a``; parameter
    and indicator variables follow so trajectory indices are stable across
    builds that do or do not introduce indicators.
    """

    def __init__(self, num_timesteps: int, num_states: int, num_actions: int, num_params: int = 0):
        self.num_timesteps = num_timesteps
        self.num_states = num_states
        self.num_actions = num_actions
        self.num_params = num_params
        self.num_aux = 0

    @property
    def num_trajectory_vars(self) -> int:
        return self.num_timesteps * self.num_states * self.num_actions

    @property
    def total_dims(self) -> int:
        return self.num_trajectory_vars + self.num_params + self.num_aux

    def flatten(self, t: int, psi: int, a: int) -> int:
        if not (0 <= t < self.num_timesteps and 0 <= psi < self.num_states and 0 <= a < self.num_actions):
            raise IndexError(f"trajectory coordinate ({t}, {psi}, {a}) out of range")
        return (t * self.num_states + psi) * self.num_actions + a

    def unflatten(self, index: int) -> tuple[int, int, int]:
        if not 0 <= index < self.num_trajectory_vars:
            raise IndexError(f"{index} is not a trajectory variable")
        t, rest = divmod(index, self.num_states * self.num_actions)
        psi, a = divmod(rest, self.num_actions)
        return t, psi, a

    def param_index(self, j: int) -> int:
        if not 0 <= j < self.num_params:
            raise IndexError(f"parameter {j} out of range")
        return self.num_trajectory_vars + j

    def add_aux(self) -> int:
        """Allocate a fresh binary indicator variable; returns its flat index."""
        self.num_aux += 1
        return self.total_dims - 1

    def is_integer(self, index: int) -> bool:
        base = self.num_trajectory_vars
        return index < base or index >= base + self.num_params

    def integer_mask(self) -> np.ndarray:
        mask = np.ones(self.total_dims, dtype=bool)
        base = self.num_trajectory_vars
        mask[base : base + self.num_params] = False
        return mask


@dataclass(frozen=True)
class LinearConstraint:
    """lower <= sum_i coeffs[i] * x_i <= upper, with exact rational data.

    ``None`` bounds are unbounded sides; an equality has lower == upper.
    """

    coeffs: dict[int, Fraction]
    lower: Fraction | None
    upper: Fraction | None

    def __post_init__(self):
        clean = {int(i): Fraction(c) for i, c in self.coeffs.items() if c != 0}
        object.__setattr__(self, "coeffs", clean)
        lo = None if self.lower is None else Fraction(self.lower)
        hi = None if self.upper is None else Fraction(self.upper)
        if lo is not None and hi is not None and lo > hi:
            raise ValueError(f"lower {lo} > upper {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def is_equality(self) -> bool:
        return self.lower is not None and self.lower == self.upper

    def value(self, x: Sequence[Rational]) -> Fraction:
        return sum((c * Fraction(x[i]) for i, c in self.coeffs.items()), Fraction(0))

    def satisfied_by(self, x: Sequence[Rational]) -> bool:
        v = self.value(x)
        if self.lower is not None and v < self.lower:
            return False
        if self.upper is not None and v > self.upper:
            return False
        return True


@dataclass
class AffineExpr:
    """A rational affine expression over flat variables, for support builders."""

    coeffs: dict[int, Fraction] = field(default_factory=dict)
    const: Fraction = Fraction(0)

    def __add__(self, other: "AffineExpr | Rational") -> "AffineExpr":
        if isinstance(other, AffineExpr):
            coeffs = dict(self.coeffs)
            for i, c in other.coeffs.items():
                coeffs[i] = coeffs.get(i, Fraction(0)) + c
            return AffineExpr(coeffs, self.const + other.const)
        return AffineExpr(dict(self.coeffs), self.const + Fraction(other))

    __radd__ = __add__

    def __mul__(self, k: Rational) -> "AffineExpr":
        k = Fraction(k)
        return AffineExpr({i: c * k for i, c in self.coeffs.items()}, self.const * k)

    __rmul__ = __mul__

    def __sub__(self, other):
        return self + (other * -1 if isinstance(other, AffineExpr) else -Fraction(other))

    def between(self, lower: Rational | None, upper: Rational | None) -> LinearConstraint:
        lo = None if lower is None else Fraction(lower) - self.const
        hi = None if upper is None else Fraction(upper) - self.const
        return LinearConstraint(dict(self.coeffs), lo, hi)

    def __le__(self, bound: Rational) -> LinearConstraint:
        return self.between(None, bound)

    def __ge__(self, bound: Rational) -> LinearConstraint:
        return self.between(bound, None)

    def equals(self, value: Rational) -> LinearConstraint:
        return self.between(value, value)


class ConstraintContext:
    """Expression factory handed to start-state and observation support builders."""

    def __init__(self, spec: AbmSpec, bc: BoundaryConditions | None, indexer: VariableIndexer):
        self.spec = spec
        self.bc = bc
        self.indexer = indexer

    def trajectory_var(self, t: int, psi: int, a: int) -> AffineExpr:
        return AffineExpr({self.indexer.flatten(t, psi, a): Fraction(1)})

    def occupancy(self, t: int, psi: int) -> AffineExpr:
        """Occupancy of ``psi`` at the start of timestep ``t`` (or final, t=N).

        For t < N this is the row sum of T^t; for t == N it is the
        occupancy produced by the last timestep's actions plus injections.
        """
        N = self.indexer.num_timesteps
        if t < N:
            coeffs = {self.indexer.flatten(t, psi, a): Fraction(1) for a in range(self.indexer.num_actions)}
            return AffineExpr(coeffs)
        if t != N:
            raise IndexError(f"occupancy time {t} outside 0..{N}")
        if self.bc is None:
            raise ValueError("final-state occupancy needs boundary conditions")
        F = self.spec.action_tensor
        coeffs = {}
        for s in range(self.indexer.num_states):
            for a in range(self.indexer.num_actions):
                if F[s, a, psi]:
                    coeffs[self.indexer.flatten(N - 1, s, a)] = Fraction(int(F[s, a, psi]))
        const = Fraction(int(self.bc.injection(N, self.spec.num_states)[psi]))
        return AffineExpr(coeffs, const)

    def start_occupancy(self, psi: int) -> AffineExpr:
        """The random part of the start state: row sums of T^0 minus injections."""
        if self.bc is None:
            raise ValueError("start occupancy needs boundary conditions")
        inj = int(self.bc.injection(0, self.spec.num_states)[psi])
        return self.occupancy(0, psi) - inj


@dataclass
class MixedIntegerPolyhedron:
    """Linear constraints plus a bounding box with its lower corner at the origin.

    Single-variable inequality rows are folded into the box on insertion
    (only tightenings that keep the lower corner at zero); equality rows
    are kept as rows so the basis reduction can pivot on them.
    """

    indexer: VariableIndexer
    box: list[Fraction | None]
    constraints: list[LinearConstraint] = field(default_factory=list)

    def add(self, constraint: LinearConstraint) -> None:
        if any(i >= self.indexer.total_dims for i in constraint.coeffs):
            raise IndexError("constraint references a variable beyond total_dims")
        if len(constraint.coeffs) == 1 and not constraint.is_equality:
            ((i, c),) = constraint.coeffs.items()
            lo, hi = constraint.lower, constraint.upper
            if c < 0:
                lo, hi = (None if hi is None else hi / c), (None if lo is None else lo / c)
            else:
                lo, hi = (None if lo is None else lo / c), (None if hi is None else hi / c)
            if hi is not None and (self.box[i] is None or hi < self.box[i]):
                if hi < 0:
                    raise ValueError(f"variable {i} forced below zero")
                self.box[i] = hi
            if lo is not None and lo > 0:
                # Cannot fold without lifting the box corner off the origin.
                self.constraints.append(constraint)
            return
        self.constraints.append(constraint)

    def add_all(self, constraints: Iterable[LinearConstraint]) -> None:
        for c in constraints:
            self.add(c)

    def require_finite_box(self) -> None:
        missing = [i for i, h in enumerate(self.box) if h is None]
        if missing:
            raise UnboundedConstraintError(f"no finite bound for variables {missing[:8]}")

    def contains(self, x: Sequence[Rational]) -> bool:
        """Exact membership test: box bounds plus every constraint row."""
        for i in range(self.indexer.total_dims):
            v = Fraction(x[i])
            if v < 0 or (self.box[i] is not None and v > self.box[i]):
                return False
        return all(c.satisfied_by(x) for c in self.constraints)

    def dump(self) -> str:
        """Debug listing: one constraint per line plus a variable table."""
        lines = []
        for c in self.constraints:
            terms = " + ".join(f"{coef}*x_{i}" for i, coef in sorted(c.coeffs.items()))
            lo = "-inf" if c.lower is None else str(c.lower)
            hi = "inf" if c.upper is None else str(c.upper)
            lines.append(f"{lo} <= {terms} <= {hi}")
        lines.append("index,kind,H")
        for i in range(self.indexer.total_dims):
            kind = "int" if self.indexer.is_integer(i) else "real"
            h = "inf" if self.box[i] is None else str(self.box[i])
            lines.append(f"{i},{kind},{h}")
        return "\n".join(lines)


def trajectory_constraints(spec: AbmSpec, num_timesteps: int, bc: BoundaryConditions) -> list[LinearConstraint]:
    """Non-negativity bounds plus the per-timestep conservation equalities.

    Timesteps t >= 1 contribute one equality per state tying the row sums
    of T^t to the occupancy produced by T^{t-1} plus injections.  At t=0
    the row sums must cover the injected agents; the remainder is the
    random start state, bounded separately by the start-state support.
    """
    S, A = spec.num_states, spec.num_actions
    indexer = VariableIndexer(num_timesteps, S, A)
    out: list[LinearConstraint] = []
    for v in range(indexer.num_trajectory_vars):
        out.append(LinearConstraint({v: Fraction(1)}, Fraction(0), None))
    F = spec.action_tensor
    for t in range(1, num_timesteps):
        inj = bc.injection(t, S)
        for phi in range(S):
            coeffs: dict[int, Fraction] = {}
            for psi in range(S):
                for a in range(A):
                    if F[psi, a, phi]:
                        coeffs[indexer.flatten(t - 1, psi, a)] = Fraction(int(F[psi, a, phi]))
            for b in range(A):
                key = indexer.flatten(t, phi, b)
                coeffs[key] = coeffs.get(key, Fraction(0)) - 1
            rhs = Fraction(-int(inj[phi]))
            out.append(LinearConstraint(coeffs, rhs, rhs))
    inj0 = bc.injection(0, S)
    for phi in range(S):
        if inj0[phi] > 0:
            coeffs = {indexer.flatten(0, phi, a): Fraction(1) for a in range(A)}
            out.append(LinearConstraint(coeffs, Fraction(int(inj0[phi])), None))
    return out


def fermionic_constraints(indexer: VariableIndexer) -> list[LinearConstraint]:
    """Upper bound of 1 on every trajectory variable (at most one agent per cell)."""
    return [
        LinearConstraint({v: Fraction(1)}, None, Fraction(1))
        for v in range(indexer.num_trajectory_vars)
    ]


def union_with_zero(
    constraints: Sequence[LinearConstraint],
    var: int,
    box: Sequence[Fraction | None],
    fermionic: bool,
    aux_index: int | None = None,
) -> list[LinearConstraint]:
    """Rewrite {constraints hold} UNION {x_var = 0, inside the box} as constraints.

    Introduces (or, under the one-per-cell assumption, reuses ``x_var`` as)
    a binary indicator z that is 0 exactly when x_var = 0, and relaxes each
    constraint row to its box-wide bound when z = 0:

        C x + (Bmax - U) z <= Bmax        (per row with a finite upper bound)
        Bmin <= C x + (Bmin - L) z        (per row with a finite lower bound)
        0 <= H_var * z - x_var,  z - x_var <= 0   (indicator ties, non-fermionic)

    where Bmax/Bmin bound C x over the box.  Requires the box lower corner
    at the origin and finite box entries on every touched variable.
    """
    if fermionic:
        if box[var] != 1:
            raise ValueError("fermionic union requires the target variable to be binary")
        z = var
    else:
        if aux_index is None:
            raise ValueError("non-fermionic union requires a fresh indicator index")
        z = aux_index

    out: list[LinearConstraint] = []
    for c in constraints:
        bmax = Fraction(0)
        bmin = Fraction(0)
        for i, coef in c.coeffs.items():
            h = box[i]
            if h is None:
                raise UnboundedConstraintError(f"variable {i} unbounded inside the box")
            if coef > 0:
                bmax += coef * h
            else:
                bmin += coef * h
        if c.upper is not None:
            coeffs = dict(c.coeffs)
            coeffs[z] = coeffs.get(z, Fraction(0)) + (bmax - c.upper)
            out.append(LinearConstraint(coeffs, None, bmax))
        if c.lower is not None:
            coeffs = dict(c.coeffs)
            coeffs[z] = coeffs.get(z, Fraction(0)) + (bmin - c.lower)
            out.append(LinearConstraint(coeffs, bmin, None))
    if not fermionic:
        h_var = box[var]
        if h_var is None:
            raise UnboundedConstraintError(f"variable {var} unbounded inside the box")
        out.append(LinearConstraint({var: Fraction(-1), z: h_var}, Fraction(0), None))
        out.append(LinearConstraint({z: Fraction(1), var: Fraction(-1)}, None, Fraction(0)))
    return out


@dataclass(frozen=True)
class OccupancySupportRow:
    """A linear condition on the occupancy vector at the actor's timestep."""

    coeffs: dict[int, Fraction]  # state index -> coefficient
    lower: Fraction | None
    upper: Fraction | None


SupportProvider = Callable[[int, int], list[OccupancySupportRow]]


def action_support_constraints(
    spec: AbmSpec,
    support_provider: SupportProvider,
    num_timesteps: int,
    poly: MixedIntegerPolyhedron,
    fermionic: bool,
) -> list[LinearConstraint]:
    """Per (t, psi, a) union constraints for actions with restricted support.

    ``support_provider(psi, a)`` returns occupancy conditions under which
    action ``a`` is possible for state ``psi`` (empty list: unrestricted).
    Each condition, instantiated at timestep t over the row-sum occupancy
    expressions, is unioned with {T^t_{psi a} = 0}.  Non-fermionic builds
    allocate one fresh indicator per restricted (t, psi, a) on the
    polyhedron's indexer and box.
    """
    ctx = ConstraintContext(spec, None, poly.indexer)
    out: list[LinearConstraint] = []
    for psi in range(spec.num_states):
        for a in range(spec.num_actions):
            rows = support_provider(psi, a)
            if not rows:
                continue
            for t in range(num_timesteps):
                var = poly.indexer.flatten(t, psi, a)
                instantiated = []
                for row in rows:
                    expr = AffineExpr()
                    for state, coef in row.coeffs.items():
                        expr = expr + ctx.occupancy(t, state) * Fraction(coef)
                    instantiated.append(expr.between(row.lower, row.upper))
                aux = None
                if not fermionic:
                    aux = poly.indexer.add_aux()
                    poly.box.append(Fraction(1))
                out.extend(union_with_zero(instantiated, var, poly.box, fermionic, aux))
    return out


def assemble(
    spec: AbmSpec,
    bc: BoundaryConditions,
    observations: Sequence[Observation],
    num_timesteps: int,
    fermionic: bool,
    support_provider: SupportProvider | None = None,
    trajectory_cap: int | None = None,
) -> MixedIntegerPolyhedron:
    """Concatenate all support constraints into one bounding polyhedron.

    Layers: conservation + non-negativity, the one-per-cell bound (if
    ``fermionic``), start-state support, observation supports, and the
    union-transformed action supports.  Without the one-per-cell bound a
    finite ``trajectory_cap`` must be supplied for the box.
    """
    indexer = VariableIndexer(num_timesteps, spec.num_states, spec.num_actions)
    if fermionic:
        cap: Fraction | None = Fraction(1)
    elif trajectory_cap is not None:
        cap = Fraction(trajectory_cap)
    else:
        cap = None
    box: list[Fraction | None] = [cap] * indexer.num_trajectory_vars
    poly = MixedIntegerPolyhedron(indexer=indexer, box=box)

    poly.add_all(trajectory_constraints(spec, num_timesteps, bc))
    if fermionic:
        poly.add_all(fermionic_constraints(indexer))

    ctx = ConstraintContext(spec, bc, indexer)
    if bc.start_state_support is not None:
        poly.add_all(bc.start_state_support(ctx))
    for obs in observations:
        if obs.support is None:
            raise ValueError("observation does not expose a support constraint builder")
        poly.add_all(obs.support(ctx))

    provider = support_provider or spec.action_support_provider
    if provider is not None:
        poly.add_all(action_support_constraints(spec, provider, num_timesteps, poly, fermionic))

    poly.require_finite_box()
    return poly


def flatten_trajectory(traj: Trajectory, indexer: VariableIndexer) -> np.ndarray:
    """Trajectory tensor -> flat integer vector, indicators set from their ties.

    Indicator variables (appended by non-fermionic unions) are derived from
    the trajectory: z = 1 exactly when the tied trajectory variable is
    non-zero.  Indicator k ties to the k-th union's target variable, which
    is recovered from the polyhedron tie rows by callers that need it; here
    indicators default to 0 and are fixed up by ``flatten_point``.
    """
    flat = np.zeros(indexer.total_dims, dtype=np.int64)
    flat[: indexer.num_trajectory_vars] = traj.tensor.reshape(-1)
    return flat


def flatten_point(traj: Trajectory, poly: MixedIntegerPolyhedron) -> np.ndarray:
    """Flatten a trajectory and set indicators to match their tied variables."""
    flat = flatten_trajectory(traj, poly.indexer)
    base = poly.indexer.num_trajectory_vars + poly.indexer.num_params
    for c in poly.constraints:
        # Tie rows have the form z - x_var <= 0 with z an indicator.
        if len(c.coeffs) == 2 and c.upper == 0 and c.lower is None:
            items = sorted(c.coeffs.items())
            (i, ci), (j, cj) = items
            if j >= base and ci == -1 and cj == 1:
                flat[j] = 1 if flat[i] != 0 else 0
    return flat


def noiseless_count_observation(
    spec: AbmSpec,
    bc: BoundaryConditions,
    time: int,
    states: Sequence[int],
    value: int,
) -> Observation:
    """Observe, without noise, the total occupancy of ``states`` at ``time``."""
    states = tuple(int(s) for s in states)
    value = int(value)

    def log_likelihood(traj: Trajectory) -> float:
        if time < traj.num_timesteps:
            occ = traj.row_sums(time)
        else:
            occ = state_after(spec, traj, bc, time)
        return 0.0 if int(occ[list(states)].sum()) == value else float("-inf")

    def support(ctx: ConstraintContext) -> list[LinearConstraint]:
        expr = AffineExpr()
        for s in states:
            expr = expr + ctx.occupancy(time, s)
        return [expr.equals(value)]

    return Observation(
        log_likelihood=log_likelihood,
        support=support,
        kind="noiseless_count",
        meta={"time": time, "states": states, "value": value},
    )
