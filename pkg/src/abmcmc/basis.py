"""Equality elimination onto a sparse integer-preserving basis.

The equality rows of the support polyhedron (conservation laws plus
noiseless observations) are eliminated by exact rational Gaussian
elimination, pivoting to keep the reduced system sparse: each pivot is
chosen to minimise the fill-in bound (column nnz - 1) * (row nnz - 1),
with ties broken by lowest column then lowest row index.

Integer preservation: an integer column may only be pivoted on an entry
that divides every entry of its row (right-hand side included) in a row
with no real-valued columns; rows touching real columns are always
eliminated on a real column.  This guarantees that integral settings of
the free variables lift to integral values on every integer dimension.

Everything here is exact ``fractions.Fraction`` arithmetic; divisibility
and equality tests carry no tolerances.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .polyhedron import LinearConstraint, MixedIntegerPolyhedron, VariableIndexer

Rational = Fraction | int


class InfeasiblePolyhedronError(RuntimeError):
    """The equality system is inconsistent: the polyhedron is empty."""


class SparseRationalMatrix:
    """Dict-of-dicts sparse matrix with O(nnz) row and column iteration."""

    def __init__(self, num_rows: int, num_cols: int):
        self.num_rows = num_rows
        self.num_cols = num_cols
        self.rows: list[dict[int, Fraction]] = [dict() for _ in range(num_rows)]
        self.cols: list[set[int]] = [set() for _ in range(num_cols)]

    def get(self, i: int, j: int) -> Fraction:
        return self.rows[i].get(j, Fraction(0))

    def set_entry(self, i: int, j: int, value: Rational) -> None:
        value = Fraction(value)
        if value == 0:
            if j in self.rows[i]:
                del self.rows[i][j]
                self.cols[j].discard(i)
        else:
            self.rows[i][j] = value
            self.cols[j].add(i)

    def row_nnz(self, i: int) -> int:
        return len(self.rows[i])

    def col_nnz(self, j: int) -> int:
        return len(self.cols[j])

    def check_consistent(self) -> None:
        for j, rows in enumerate(self.cols):
            for i in rows:
                if j not in self.rows[i]:
                    raise AssertionError(f"column view out of sync at ({i}, {j})")
        for i, row in enumerate(self.rows):
            for j in row:
                if i not in self.cols[j]:
                    raise AssertionError(f"row view out of sync at ({i}, {j})")


def split_equalities(
    poly: MixedIntegerPolyhedron,
) -> tuple[list[LinearConstraint], list[LinearConstraint]]:
    """Partition constraints into equality rows (lower == upper) and the rest."""
    equalities = [c for c in poly.constraints if c.is_equality]
    inequalities = [c for c in poly.constraints if not c.is_equality]
    return equalities, inequalities


def markowitz_cost(W: SparseRationalMatrix, i: int, j: int) -> int:
    """Fill-in bound (col nnz - 1)(row nnz - 1) for pivoting on W[i][j]."""
    if W.get(i, j) == 0:
        raise ValueError(f"zero pivot entry at ({i}, {j})")
    return (W.col_nnz(j) - 1) * (W.row_nnz(i) - 1)


def _divisibility_ok(row: dict[int, Fraction], rhs: Fraction, pivot: Fraction) -> bool:
    if (rhs / pivot).denominator != 1:
        return False
    return all((w / pivot).denominator == 1 for w in row.values())


def valid_pivots(
    W: SparseRationalMatrix,
    rhs: Sequence[Fraction],
    integer_mask: Sequence[bool],
    reduced_rows: set[int],
    basic_cols: set[int],
) -> set[tuple[int, int]]:
    """All admissible pivot points under the integer-preservation rule.

    Rows 0..len(rhs)-1 of W are the equality rows; only those may pivot.
    A pivot (i, j) is valid when W[i][j] != 0 and either column j is
    real-valued, or it is integer, row i has no entries on real columns,
    and W[i][j] divides the whole row and its right-hand side.
    """
    out: set[tuple[int, int]] = set()
    for i in range(len(rhs)):
        if i in reduced_rows:
            continue
        row = W.rows[i]
        row_has_real = any(not integer_mask[k] for k in row)
        for j, v in row.items():
            if j in basic_cols:
                continue
            if not integer_mask[j]:
                out.add((i, j))
            elif not row_has_real and _divisibility_ok(row, rhs[i], v):
                out.add((i, j))
    return out


@dataclass
class BasisReduction:
    """The affine lift X = V + M @ X_N and the reduced inequality system.

    ``basic_indices`` lists eliminated dimensions in pivot order;
    ``nonbasic_indices`` (ascending) define the coordinates of X_N.
    ``m_rows[d]`` maps X_N positions to the rational coefficients of
    dimension ``d``; nonbasic dimensions carry their own unit row.
    ``reduced_constraints`` are over X_N positions and include any
    equality rows that could not be eliminated (kept with lower == upper).
    """

    indexer: VariableIndexer
    polyhedron: MixedIntegerPolyhedron
    basic_indices: list[int]
    nonbasic_indices: list[int]
    v_base: list[Fraction]
    m_rows: list[dict[int, Fraction]]
    reduced_constraints: list[LinearConstraint]
    residual_equalities: int
    elimination_steps: int
    h_nonbasic: list[Fraction]
    h_basic: list[Fraction]
    integer_mask_nonbasic: list[bool]
    position_of_dim: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.position_of_dim:
            self.position_of_dim = {d: p for p, d in enumerate(self.nonbasic_indices)}

    @property
    def num_nonbasic(self) -> int:
        return len(self.nonbasic_indices)

    def m_nnz(self) -> int:
        return sum(len(r) for r in self.m_rows)

    def report(self) -> dict:
        size = self.indexer.total_dims * max(self.num_nonbasic, 1)
        return {
            "basic_variables": len(self.basic_indices),
            "nonbasic_variables": self.num_nonbasic,
            "residual_equalities": self.residual_equalities,
            "m_nnz": self.m_nnz(),
            "m_density": self.m_nnz() / size,
            "elimination_steps": self.elimination_steps,
        }


def lift(reduction: BasisReduction, x_n: Sequence[Rational]) -> list[Fraction]:
    """Exact evaluation of X = V + M @ X_N."""
    if len(x_n) != reduction.num_nonbasic:
        raise ValueError(f"expected {reduction.num_nonbasic} coordinates, got {len(x_n)}")
    vals = [Fraction(v) for v in x_n]
    out = list(reduction.v_base)
    for d in range(reduction.indexer.total_dims):
        row = reduction.m_rows[d]
        if row:
            out[d] = out[d] + sum(c * vals[p] for p, c in row.items())
    return out


def nonbasic_coordinates(reduction: BasisReduction, x_full: Sequence[Rational]) -> list[Fraction]:
    """Read the X_N coordinates off a full point (the lift's left inverse)."""
    return [Fraction(x_full[d]) for d in reduction.nonbasic_indices]


def reduce(poly: MixedIntegerPolyhedron) -> BasisReduction:
    """Eliminate equality rows with Markowitz-pivoted exact Gaussian elimination.

    Repeatedly picks the valid pivot with minimal fill-in bound (ties:
    lowest column, then lowest row), scales the pivot row to a unit pivot
    and clears the pivot column from every other row, bounds included.
    Stops when no valid pivot remains; remaining equality rows are carried
    into the reduced system as tight inequalities.
    """
    indexer = poly.indexer
    n_dims = indexer.total_dims
    equalities, inequalities = split_equalities(poly)
    n_eq = len(equalities)
    n_rows = n_eq + len(inequalities)

    W = SparseRationalMatrix(n_rows, n_dims)
    lo: list[Fraction | None] = [None] * n_rows
    hi: list[Fraction | None] = [None] * n_rows
    for i, c in enumerate(equalities + inequalities):
        for j, v in c.coeffs.items():
            W.set_entry(i, j, v)
        lo[i], hi[i] = c.lower, c.upper

    integer_mask = [indexer.is_integer(j) for j in range(n_dims)]
    row_real_count = [sum(1 for j in W.rows[i] if not integer_mask[j]) for i in range(n_rows)]
    reduced = [False] * n_rows
    basic = [False] * n_dims
    basic_order: list[int] = []
    row_of_basic: dict[int, int] = {}

    heap: list[tuple[int, int, int]] = []

    def push(i: int, j: int) -> None:
        if i < n_eq and not reduced[i] and not basic[j] and j in W.rows[i]:
            heapq.heappush(heap, (markowitz_cost(W, i, j), j, i))

    def pivot_ok(i: int, j: int) -> bool:
        if not integer_mask[j]:
            return True
        if row_real_count[i] > 0:
            return False
        return _divisibility_ok(W.rows[i], lo[i], W.rows[i][j])

    for i in range(n_eq):
        for j in W.rows[i]:
            push(i, j)

    steps = 0
    while heap:
        mu, j, i = heapq.heappop(heap)
        if reduced[i] or basic[j] or j not in W.rows[i]:
            continue
        current = markowitz_cost(W, i, j)
        if current != mu:
            heapq.heappush(heap, (current, j, i))
            continue
        if not pivot_ok(i, j):
            continue

        # Normalize the pivot row to a unit pivot.
        v = W.rows[i][j]
        if v != 1:
            for k in list(W.rows[i]):
                W.rows[i][k] /= v
            lo[i] = lo[i] / v
            hi[i] = lo[i]
        pivot_row = W.rows[i]
        rhs_i = lo[i]

        touched_rows = sorted(W.cols[j] - {i})
        fill_cols: set[int] = set()
        for r in touched_rows:
            f = W.rows[r][j]
            for k, w in pivot_row.items():
                old = W.rows[r].get(k)
                new = (old if old is not None else Fraction(0)) - f * w
                if old is None:
                    if new != 0:
                        W.rows[r][k] = new
                        W.cols[k].add(r)
                        fill_cols.add(k)
                        if not integer_mask[k]:
                            row_real_count[r] += 1
                elif new == 0:
                    del W.rows[r][k]
                    W.cols[k].discard(r)
                    fill_cols.add(k)
                    if not integer_mask[k]:
                        row_real_count[r] -= 1
                else:
                    W.rows[r][k] = new
            shift = f * rhs_i
            if lo[r] is not None:
                lo[r] = lo[r] - shift
            if hi[r] is not None:
                hi[r] = hi[r] - shift

        reduced[i] = True
        basic[j] = True
        basic_order.append(j)
        row_of_basic[j] = i
        steps += 1

        # Refresh candidates whose Markowitz cost changed: every entry of a
        # modified row, and every entry of a column whose nnz changed.
        for r in touched_rows:
            if r < n_eq and not reduced[r]:
                for k in W.rows[r]:
                    push(r, k)
        for k in fill_cols:
            if not basic[k]:
                for r in W.cols[k]:
                    push(r, k)

    # Classify leftover rows.
    residual: list[tuple[dict[int, Fraction], Fraction, Fraction]] = []
    for i in range(n_eq):
        if reduced[i]:
            continue
        if not W.rows[i]:
            if lo[i] != 0:
                raise InfeasiblePolyhedronError(f"equality row {i} reduced to 0 = {lo[i]}")
            continue
        residual.append((dict(W.rows[i]), lo[i], hi[i]))

    nonbasic = [j for j in range(n_dims) if not basic[j]]
    pos = {j: p for p, j in enumerate(nonbasic)}

    v_base = [Fraction(0)] * n_dims
    m_rows: list[dict[int, Fraction]] = [dict() for _ in range(n_dims)]
    for j in nonbasic:
        m_rows[j][pos[j]] = Fraction(1)
    for b in basic_order:
        i = row_of_basic[b]
        assert W.rows[i][b] == 1
        v_base[b] = lo[i]
        m_rows[b] = {pos[k]: -w for k, w in W.rows[i].items() if k != b}

    reduced_constraints: list[LinearConstraint] = []
    for i in range(n_eq, n_rows):
        row = W.rows[i]
        if not row:
            zero_ok = (lo[i] is None or lo[i] <= 0) and (hi[i] is None or hi[i] >= 0)
            if not zero_ok:
                raise InfeasiblePolyhedronError(f"inequality row {i} reduced to 0 in [{lo[i]}, {hi[i]}]")
            continue
        assert all(not basic[k] for k in row)
        reduced_constraints.append(LinearConstraint({pos[k]: w for k, w in row.items()}, lo[i], hi[i]))
    for row, rlo, rhi in residual:
        assert all(not basic[k] for k in row)
        reduced_constraints.append(LinearConstraint({pos[k]: w for k, w in row.items()}, rlo, rhi))

    return BasisReduction(
        indexer=indexer,
        polyhedron=poly,
        basic_indices=basic_order,
        nonbasic_indices=nonbasic,
        v_base=v_base,
        m_rows=m_rows,
        reduced_constraints=reduced_constraints,
        residual_equalities=len(residual),
        elimination_steps=steps,
        h_nonbasic=[poly.box[j] for j in nonbasic],
        h_basic=[poly.box[j] for j in basic_order],
        integer_mask_nonbasic=[integer_mask[j] for j in nonbasic],
    )


def compose_over_nonbasic(
    reduction: BasisReduction, coeffs: dict[int, Fraction], const: Fraction = Fraction(0)
) -> tuple[dict[int, Fraction], Fraction]:
    """Express an affine form over X as (row over X_N, constant offset)."""
    row: dict[int, Fraction] = {}
    offset = Fraction(const)
    for d, c in coeffs.items():
        c = Fraction(c)
        offset += c * reduction.v_base[d]
        for p, m in reduction.m_rows[d].items():
            row[p] = row.get(p, Fraction(0)) + c * m
    return {p: c for p, c in row.items() if c != 0}, offset


def basic_box_constraints(reduction: BasisReduction) -> list[LinearConstraint]:
    """Box bounds on eliminated dimensions, expressed over X_N.

    0 <= V_b + M_b X_N <= H_b  becomes  -V_b <= M_b X_N <= H_b - V_b.
    """
    out = []
    for b, h in zip(reduction.basic_indices, reduction.h_basic):
        row = dict(reduction.m_rows[b])
        v = reduction.v_base[b]
        out.append(LinearConstraint(row, -v, (h - v) if h is not None else None))
    return out


def lifted_trajectory_array(reduction: BasisReduction, x_n: Sequence[Rational]) -> np.ndarray:
    """Lift and reshape the trajectory block to (N, S, A) float64."""
    full = lift(reduction, x_n)
    idx = reduction.indexer
    arr = np.array(
        [float(v) for v in full[: idx.num_trajectory_vars]], dtype=float
    ).reshape(idx.num_timesteps, idx.num_states, idx.num_actions)
    return arr
