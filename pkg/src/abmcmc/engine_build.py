"""Compilation of a reduced model into the flat arrays the sampler cores use.

Both the compiled extension core and the pure-python fallback consume the
same ``EngineProblem``: CSR factor rows over the free coordinates, the
transposed variable-to-factor index, the sparse lift columns, per-cell
factor positions for the multinomial terms, the reverse influence map
used to re-evaluate exact cell terms incrementally, and optional tracker
rows whose affine values are maintained alongside the state (used for
region summary statistics).

Factor kinds are closed-form so the hot loop never calls back into
python for them; only the agent timestep and the start-state density
remain python callbacks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .basis import BasisReduction, compose_over_nonbasic
from .factors import FactorizedDistribution
from .model import AbmSpec, BoundaryConditions, Observation

KIND_CONSTRAINT = 0
KIND_COUNT_ACTION = 1
KIND_COUNT_ROWSUM = 2
KIND_AFFINE = 3

_KIND_CODES = {
    "constraint": KIND_CONSTRAINT,
    "count_action": KIND_COUNT_ACTION,
    "count_rowsum": KIND_COUNT_ROWSUM,
    "affine": KIND_AFFINE,
}

# Strictly positive floor on proposal weights: keeps the sum tree total
# positive and the chain irreducible through deeply infeasible states.
WEIGHT_FLOOR = math.exp(-50.0)


@dataclass
class EngineProblem:
    """Flat-array description of one sampling problem (immutable by convention)."""

    n: int
    total_dims: int
    n_traj: int
    num_timesteps: int
    num_states: int
    num_actions: int
    h_n: np.ndarray
    is_int: np.ndarray
    # factors, CSR over X_N positions
    f_indptr: np.ndarray
    f_var: np.ndarray
    f_coef: np.ndarray
    f_off: np.ndarray
    f_kind: np.ndarray
    f_p0: np.ndarray
    f_p1: np.ndarray
    f_p2: np.ndarray
    n_constraint: int
    # variable -> factor transpose
    v_indptr: np.ndarray
    v_fid: np.ndarray
    v_coef: np.ndarray
    # lift columns
    m_indptr: np.ndarray
    m_row: np.ndarray
    m_coef: np.ndarray
    v_base: np.ndarray
    # multinomial cell -> factor positions
    rowsum_fid: np.ndarray
    action_fid: np.ndarray
    # reverse influence: occupancy state -> cells whose exact term may change
    rinf_indptr: np.ndarray
    rinf_state: np.ndarray
    inj0: np.ndarray
    # tracker rows (affine stats maintained with the state)
    n_trackers: int
    tr_off: np.ndarray
    trv_indptr: np.ndarray
    trv_tid: np.ndarray
    trv_coef: np.ndarray
    # scalars and callbacks
    inv_tau: float
    weight_floor: float
    pi: Callable[[int, np.ndarray, int], float]
    start_exact: Callable[[np.ndarray], float]
    start_approx: Callable[[np.ndarray], float] | None


def _csr_from_rows(rows: list[dict[int, float]], n_cols: int):
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    idx: list[int] = []
    coef: list[float] = []
    for r, row in enumerate(rows):
        for k in sorted(row):
            idx.append(k)
            coef.append(row[k])
        indptr[r + 1] = len(idx)
    return indptr, np.array(idx, dtype=np.int32), np.array(coef, dtype=np.float64)


def _transpose_csr(indptr, idx, coef, n_rows: int, n_cols: int):
    counts = np.zeros(n_cols + 1, dtype=np.int64)
    for k in idx:
        counts[k + 1] += 1
    out_indptr = np.cumsum(counts)
    out_rid = np.empty(len(idx), dtype=np.int32)
    out_coef = np.empty(len(idx), dtype=np.float64)
    cursor = out_indptr[:-1].copy()
    for r in range(n_rows):
        for p in range(indptr[r], indptr[r + 1]):
            k = idx[p]
            out_rid[cursor[k]] = r
            out_coef[cursor[k]] = coef[p]
            cursor[k] += 1
    return out_indptr, out_rid, out_coef


def validate_observations_for_engine(observations: Sequence[Observation]) -> None:
    """The sampler cores handle observations through their support constraints.

    That is exact for noiseless count observations (their likelihood is an
    indicator already encoded as an equality row).  Observations with a
    non-trivial likelihood inside their support would need dedicated
    factors; reject them rather than sample the wrong target.
    """
    for obs in observations:
        if obs.kind != "noiseless_count":
            raise NotImplementedError(
                f"sampler cores only support noiseless count observations, got kind={obs.kind!r}"
            )


def build_engine_problem(
    spec: AbmSpec,
    bc: BoundaryConditions,
    reduction: BasisReduction,
    fd: FactorizedDistribution,
    tracker_rows: Sequence[tuple[dict[int, Fraction], Fraction]] = (),
) -> EngineProblem:
    """Flatten a reduced model + factorized target into engine arrays.

    ``tracker_rows`` are affine forms over the full variable space (coeff
    dict, constant); they are composed through the lift and maintained
    incrementally by the cores.
    """
    idx = reduction.indexer
    n = reduction.num_nonbasic
    S, A, N = idx.num_states, idx.num_actions, idx.num_timesteps

    h_n = np.array([float(h) for h in reduction.h_nonbasic], dtype=np.float64)
    is_int = np.array(reduction.integer_mask_nonbasic, dtype=np.uint8)

    rows = []
    kinds = np.empty(len(fd.factors), dtype=np.uint8)
    offs = np.empty(len(fd.factors), dtype=np.float64)
    p0 = np.zeros(len(fd.factors), dtype=np.float64)
    p1 = np.zeros(len(fd.factors), dtype=np.float64)
    p2 = np.zeros(len(fd.factors), dtype=np.float64)
    n_constraint = 0
    for fid, f in enumerate(fd.factors):
        if f.kind not in _KIND_CODES:
            raise NotImplementedError(f"factor kind {f.kind!r} has no engine implementation")
        kinds[fid] = _KIND_CODES[f.kind]
        if kinds[fid] == KIND_CONSTRAINT:
            if fid != n_constraint:
                raise ValueError("constraint factors must precede count factors")
            n_constraint += 1
        offs[fid] = float(f.offset)
        params = f.params
        p0[fid] = params[0]
        if len(params) > 1:
            p1[fid] = params[1]
        if len(params) > 2:
            p2[fid] = params[2]
        rows.append({p: float(c) for p, c in f.row.items()})
    f_indptr, f_var, f_coef = _csr_from_rows(rows, n)
    v_indptr, v_fid, v_coef = _transpose_csr(f_indptr, f_var, f_coef, len(rows), n)

    m_cols: list[dict[int, float]] = [dict() for _ in range(n)]
    for d in range(idx.total_dims):
        for p, c in reduction.m_rows[d].items():
            m_cols[p][d] = float(c)
    m_indptr, m_row, m_coef = _csr_from_rows(m_cols, idx.total_dims)
    v_base = np.array([float(v) for v in reduction.v_base], dtype=np.float64)

    if fd.cell_index is None:
        raise ValueError("factorized distribution lacks its cell index (use build_factorized)")

    if spec.influence is None:
        rev: list[list[int]] = [list(range(S)) for _ in range(S)]
    else:
        rev = [[] for _ in range(S)]
        for psi in range(S):
            for phi in spec.influence(psi):
                rev[int(phi)].append(psi)
    rinf_indptr = np.zeros(S + 1, dtype=np.int64)
    rinf_state: list[int] = []
    for phi in range(S):
        rinf_state.extend(sorted(rev[phi]))
        rinf_indptr[phi + 1] = len(rinf_state)

    tr_rows: list[dict[int, float]] = []
    tr_off = np.zeros(len(tracker_rows), dtype=np.float64)
    for t, (coeffs, const) in enumerate(tracker_rows):
        row, offset = compose_over_nonbasic(reduction, coeffs, const)
        tr_rows.append({p: float(c) for p, c in row.items()})
        tr_off[t] = float(offset)
    t_indptr, t_var, t_coef = _csr_from_rows(tr_rows, n)
    trv_indptr, trv_tid, trv_coef = _transpose_csr(t_indptr, t_var, t_coef, len(tr_rows), n)

    return EngineProblem(
        n=n,
        total_dims=idx.total_dims,
        n_traj=idx.num_trajectory_vars,
        num_timesteps=N,
        num_states=S,
        num_actions=A,
        h_n=h_n,
        is_int=is_int,
        f_indptr=f_indptr,
        f_var=f_var,
        f_coef=f_coef,
        f_off=offs,
        f_kind=kinds,
        f_p0=p0,
        f_p1=p1,
        f_p2=p2,
        n_constraint=n_constraint,
        v_indptr=v_indptr,
        v_fid=v_fid,
        v_coef=v_coef,
        m_indptr=m_indptr,
        m_row=m_row,
        m_coef=m_coef,
        v_base=v_base,
        rowsum_fid=np.asarray(fd.cell_index.rowsum_fid, dtype=np.int32),
        action_fid=np.asarray(fd.cell_index.action_fid, dtype=np.int32),
        rinf_indptr=rinf_indptr,
        rinf_state=np.array(rinf_state, dtype=np.int32),
        inj0=bc.injection(0, S).astype(np.float64),
        n_trackers=len(tr_rows),
        tr_off=tr_off,
        trv_indptr=trv_indptr,
        trv_tid=trv_tid,
        trv_coef=trv_coef,
        inv_tau=1.0 / fd.tau,
        weight_floor=WEIGHT_FLOOR,
        pi=spec.agent_timestep,
        start_exact=bc.start_state_log_prob,
        start_approx=bc.start_state_approx_log_prob,
    )
