import numpy as np
import pytest

from abmcmc import AbmSpec, BoundaryConditions
from abmcmc.models import build_cat_mouse, cat_left_observation


@pytest.fixture(scope="session")
def cat_mouse():
    return build_cat_mouse()


@pytest.fixture(scope="session")
def worked_example(cat_mouse):
    """Two timesteps, coin-flip start, one cat observed on the left at t=1."""
    spec, bc = cat_mouse
    return spec, bc, [cat_left_observation(spec, bc)]


def fixed_start_bc(start: np.ndarray, num_states: int) -> BoundaryConditions:
    """Point-mass start distribution at a known occupancy."""
    start = np.asarray(start, dtype=np.int64)

    def log_prob(occ):
        return 0.0 if np.array_equal(occ, start) else float("-inf")

    return BoundaryConditions(
        start_state_log_prob=log_prob,
        start_state_sampler=lambda rng: start.copy(),
        start_state_support=lambda ctx: [ctx.start_occupancy(psi).equals(int(start[psi])) for psi in range(num_states)],
        start_state_enumerator=lambda: [start.copy()],
    )


def two_action_pair_spec() -> AbmSpec:
    """One state, two actions, both keeping the agent in place, p = 1/2 each."""
    F = np.zeros((1, 2, 1), dtype=np.int64)
    F[0, 0, 0] = 1
    F[0, 1, 0] = 1
    return AbmSpec(
        num_states=1,
        num_actions=2,
        agent_timestep=lambda psi, occ, a: 0.5,
        action_tensor=F,
        influence=lambda psi: (),
    )
