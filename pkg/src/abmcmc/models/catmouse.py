"""Two-square cat-and-mouse model.

Four agent states (cat or mouse, on the left or right square) and two
actions (move to the other square, stay).  Cats move or stay with equal
probability; a mouse moves exactly when a cat shares its square and
stays otherwise.  Start state: each of the four states is occupied by
one agent with probability 1/2, independently.

Small enough to enumerate exactly, which makes it the test oracle for
the whole sampling pipeline.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np

from ..model import AbmSpec, BoundaryConditions, Observation
from ..polyhedron import OccupancySupportRow, noiseless_count_observation

LEFT_CAT, RIGHT_CAT, LEFT_MOUSE, RIGHT_MOUSE = 0, 1, 2, 3
MOVE, STAY = 0, 1

# Which cat state shares a square with each mouse state.
_CAT_OF_MOUSE = {LEFT_MOUSE: LEFT_CAT, RIGHT_MOUSE: RIGHT_CAT}


def _agent_timestep(psi: int, occupancy: np.ndarray, a: int) -> float:
    if psi in (LEFT_CAT, RIGHT_CAT):
        return 0.5
    cats_here = occupancy[_CAT_OF_MOUSE[psi]]
    if cats_here > 0:
        return 1.0 if a == MOVE else 0.0
    return 1.0 if a == STAY else 0.0


def _action_tensor() -> np.ndarray:
    F = np.zeros((4, 2, 4), dtype=np.int64)
    other = {LEFT_CAT: RIGHT_CAT, RIGHT_CAT: LEFT_CAT, LEFT_MOUSE: RIGHT_MOUSE, RIGHT_MOUSE: LEFT_MOUSE}
    for psi in range(4):
        F[psi, MOVE, other[psi]] = 1
        F[psi, STAY, psi] = 1
    return F


def _support_provider(psi: int, a: int) -> list[OccupancySupportRow]:
    if psi not in _CAT_OF_MOUSE:
        return []
    cat = _CAT_OF_MOUSE[psi]
    if a == MOVE:
        return [OccupancySupportRow({cat: Fraction(1)}, Fraction(1), None)]
    return [OccupancySupportRow({cat: Fraction(1)}, None, Fraction(0))]


def build_cat_mouse(occupancy_prob: float = 0.5) -> tuple[AbmSpec, BoundaryConditions]:
    """The four-state model plus its coin-flip start distribution."""
    p = occupancy_prob
    log_p, log_1p = math.log(p), math.log(1.0 - p)
    tilt = log_p - log_1p

    spec = AbmSpec(
        num_states=4,
        num_actions=2,
        agent_timestep=_agent_timestep,
        action_tensor=_action_tensor(),
        influence=lambda psi: (_CAT_OF_MOUSE[psi],) if psi in _CAT_OF_MOUSE else (),
        action_support_provider=_support_provider,
    )

    def start_log_prob(occ: np.ndarray) -> float:
        total = 0.0
        for v in occ:
            if v == 1:
                total += log_p
            elif v == 0:
                total += log_1p
            else:
                return float("-inf")
        return total

    def start_approx(occ: np.ndarray) -> float:
        clamped = np.clip(occ, 0.0, 1.0)
        return float(4 * log_1p + tilt * clamped.sum())

    bc = BoundaryConditions(
        start_state_log_prob=start_log_prob,
        start_state_sampler=lambda rng: (rng.random(4) < p).astype(np.int64),
        start_state_support=lambda ctx: [ctx.start_occupancy(psi) <= 1 for psi in range(4)],
        start_state_enumerator=lambda: (np.array(bits, dtype=np.int64) for bits in itertools.product((0, 1), repeat=4)),
        start_state_approx_log_prob=start_approx,
        start_state_tilt=np.full(4, tilt),
    )
    return spec, bc


def cat_left_observation(spec: AbmSpec, bc: BoundaryConditions, time: int = 1, count: int = 1) -> Observation:
    """Noiseless count of cats on the left square at the given time."""
    return noiseless_count_observation(spec, bc, time, [LEFT_CAT], count)
