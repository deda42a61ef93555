"""Spatial predator-prey model on a toroidal grid.

One agent state per (species, cell); nine actions: move to one of the
four neighbouring cells, give birth onto one of them (the parent stays
put), or die.  Behaviour probabilities condition on whether any agent of
the other species sits on a 4-neighbouring cell: prey die much more
often next to predators, and predators can only give birth next to prey.
Move and birth mass is split uniformly over the four directions.

The start state occupies each (species, cell) independently with a small
probability; synthetic observations are noiseless per-cell species
counts drawn at random timesteps and cells.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ..model import AbmSpec, BoundaryConditions, Observation, Trajectory, simulate
from ..polyhedron import OccupancySupportRow, noiseless_count_observation

PREDATOR, PREY = 0, 1
SPECIES_NAMES = {PREDATOR: "predator", PREY: "prey"}
SPECIES_IDS = {v: k for k, v in SPECIES_NAMES.items()}

MOVE_ACTIONS = (0, 1, 2, 3)  # up, down, left, right
BIRTH_ACTIONS = (4, 5, 6, 7)
DIE_ACTION = 8
NUM_ACTIONS = 9

# (die, give birth, move) for each (species, other-species-adjacent) case.
DEFAULT_BEHAVIOUR = {
    (PREY, False): (0.100, 0.156, 0.744),
    (PREY, True): (0.400, 0.156, 0.444),
    (PREDATOR, False): (0.100, 0.000, 0.900),
    (PREDATOR, True): (0.100, 0.300, 0.600),
}


@dataclass(frozen=True)
class PredatorPreyParams:
    """Grid geometry, behaviour table and experiment probabilities."""

    grid_width: int = 32
    grid_height: int = 32
    behaviour: dict = field(default_factory=lambda: dict(DEFAULT_BEHAVIOUR))
    start_occupancy_prob: float = 0.05
    observation_prob: float = 0.05
    timesteps: int = 16

    def __post_init__(self):
        if self.grid_width < 2 or self.grid_height < 2:
            raise ValueError("grid must be at least 2x2")
        for key, (die, birth, move) in self.behaviour.items():
            if abs(die + birth + move - 1.0) > 1e-9:
                raise ValueError(f"behaviour triple for {key} sums to {die + birth + move}")

    @property
    def num_cells(self) -> int:
        return self.grid_width * self.grid_height

    @property
    def num_states(self) -> int:
        return 2 * self.num_cells

    def state_index(self, species: int, x: int, y: int) -> int:
        return species * self.num_cells + y * self.grid_width + x

    def state_coords(self, psi: int) -> tuple[int, int, int]:
        species, cell = divmod(psi, self.num_cells)
        y, x = divmod(cell, self.grid_width)
        return species, x, y


def _neighbour_table(params: PredatorPreyParams) -> np.ndarray:
    """Cell index of the up/down/left/right neighbour, with torus wrap."""
    W, H = params.grid_width, params.grid_height
    table = np.zeros((params.num_cells, 4), dtype=np.int64)
    for y in range(H):
        for x in range(W):
            cell = y * W + x
            table[cell, 0] = ((y - 1) % H) * W + x
            table[cell, 1] = ((y + 1) % H) * W + x
            table[cell, 2] = y * W + (x - 1) % W
            table[cell, 3] = y * W + (x + 1) % W
    return table


def build_predator_prey(params: PredatorPreyParams) -> tuple[AbmSpec, BoundaryConditions]:
    """Model spec plus the independent-occupancy start distribution."""
    neigh = _neighbour_table(params)
    num_cells = params.num_cells
    S = params.num_states
    behaviour = {k: tuple(v) for k, v in params.behaviour.items()}

    def agent_timestep(psi: int, occupancy: np.ndarray, a: int) -> float:
        species, cell = divmod(psi, num_cells)
        other_base = (1 - species) * num_cells
        adjacent = 0.0
        for d in range(4):
            adjacent += occupancy[other_base + neigh[cell, d]]
        die, birth, move = behaviour[(species, adjacent > 0)]
        if a == DIE_ACTION:
            return die
        if a in BIRTH_ACTIONS:
            return birth / 4.0
        return move / 4.0

    F = np.zeros((S, NUM_ACTIONS, S), dtype=np.int64)
    for psi in range(S):
        species, cell = divmod(psi, num_cells)
        base = species * num_cells
        for d in range(4):
            F[psi, MOVE_ACTIONS[d], base + neigh[cell, d]] = 1
            F[psi, BIRTH_ACTIONS[d], psi] += 1
            F[psi, BIRTH_ACTIONS[d], base + neigh[cell, d]] += 1

    def influence(psi: int):
        species, cell = divmod(psi, num_cells)
        other_base = (1 - species) * num_cells
        return tuple(int(other_base + neigh[cell, d]) for d in range(4))

    def support_provider(psi: int, a: int) -> list[OccupancySupportRow]:
        species, cell = divmod(psi, num_cells)
        if species != PREDATOR or a not in BIRTH_ACTIONS:
            return []
        prey_base = PREY * num_cells
        coeffs = {}
        for d in range(4):
            state = int(prey_base + neigh[cell, d])
            coeffs[state] = coeffs.get(state, Fraction(0)) + 1
        return [OccupancySupportRow(coeffs, Fraction(1), None)]

    spec = AbmSpec(
        num_states=S,
        num_actions=NUM_ACTIONS,
        agent_timestep=agent_timestep,
        action_tensor=F,
        influence=influence,
        action_support_provider=support_provider,
    )

    p = params.start_occupancy_prob
    log_p, log_1p = math.log(p), math.log(1.0 - p)
    tilt = log_p - log_1p

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
        return float(S * log_1p + tilt * clamped.sum())

    bc = BoundaryConditions(
        start_state_log_prob=start_log_prob,
        start_state_sampler=lambda rng: (rng.random(S) < p).astype(np.int64),
        start_state_support=lambda ctx: [ctx.start_occupancy(psi) <= 1 for psi in range(S)],
        start_state_approx_log_prob=start_approx,
        start_state_tilt=np.full(S, tilt),
    )
    return spec, bc


class FermionicRetryExceeded(RuntimeError):
    pass


def generate_observations(
    params: PredatorPreyParams,
    spec: AbmSpec,
    bc: BoundaryConditions,
    rng: np.random.Generator,
    fermionic_retry: bool = True,
    max_retries: int = 10_000,
) -> tuple[Trajectory, list[Observation]]:
    """Draw a ground-truth trajectory and noiseless observations from it.

    Simulates from the start distribution, redrawing the whole trajectory
    until no count cell exceeds one (when ``fermionic_retry``); then, for
    every timestep and cell, observes each species' true count there with
    probability ``observation_prob``.
    """
    N = params.timesteps
    for _ in range(max_retries):
        t_real = simulate(spec, bc, N, rng)
        if not fermionic_retry or not (t_real.tensor > 1).any():
            break
    else:
        raise FermionicRetryExceeded(f"no one-agent-per-cell trajectory in {max_retries} draws")

    observations = []
    q = params.observation_prob
    for t in range(N):
        occ = t_real.row_sums(t)
        for cell in range(params.num_cells):
            for species in (PREDATOR, PREY):
                if rng.random() < q:
                    state = species * params.num_cells + cell
                    observations.append(
                        noiseless_count_observation(spec, bc, t, [state], int(occ[state]))
                    )
    return t_real, observations


def observations_to_csv(params: PredatorPreyParams, observations: list[Observation]) -> str:
    """Serialize noiseless count observations as ``t,x,y,species,count``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "x", "y", "species", "count"])
    for obs in observations:
        if obs.kind != "noiseless_count" or len(obs.meta["states"]) != 1:
            raise ValueError("only single-state noiseless counts serialize to this format")
        species, x, y = params.state_coords(obs.meta["states"][0])
        w.writerow([obs.meta["time"], x, y, SPECIES_NAMES[species], obs.meta["value"]])
    return buf.getvalue()


def observations_from_csv(
    params: PredatorPreyParams, spec: AbmSpec, bc: BoundaryConditions, text: str
) -> list[Observation]:
    out = []
    rows = csv.reader(io.StringIO(text))
    header = next(rows)
    if header != ["t", "x", "y", "species", "count"]:
        raise ValueError(f"unexpected observation CSV header: {header}")
    for row in rows:
        if not row:
            continue
        t, x, y, species, count = int(row[0]), int(row[1]), int(row[2]), row[3], int(row[4])
        state = params.state_index(SPECIES_IDS[species], x, y)
        out.append(noiseless_count_observation(spec, bc, t, [state], count))
    return out


def corner_regions(params: PredatorPreyParams, fractions=(1.0, 0.5, 0.25, 0.125)) -> list[np.ndarray]:
    """Nested square regions anchored at the grid corner, as state-index sets.

    Each region covers both species on its cells; side lengths default to
    the whole grid and its successive halvings.
    """
    side = min(params.grid_width, params.grid_height)
    regions = []
    for frac in fractions:
        extent = max(int(round(side * frac)), 1)
        states = []
        for y in range(min(extent, params.grid_height)):
            for x in range(min(extent, params.grid_width)):
                cell = y * params.grid_width + x
                states.append(PREDATOR * params.num_cells + cell)
                states.append(PREY * params.num_cells + cell)
        regions.append(np.array(sorted(states), dtype=np.int64))
    return regions
