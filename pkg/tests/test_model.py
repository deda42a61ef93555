import math

import numpy as np
import pytest

from abmcmc import (
    EnumerationLimitExceeded,
    Trajectory,
    enumerate_posterior,
    forecast_log_prob,
    is_continuous,
    posterior_log_prob,
    simulate,
    state_after,
)
from abmcmc.model import BoundaryConditions, NonNormalizedTimestep, occupancy_csv
from abmcmc.models import cat_left_observation
from abmcmc.models.catmouse import LEFT_CAT, LEFT_MOUSE, MOVE, RIGHT_CAT, STAY

from conftest import fixed_start_bc, two_action_pair_spec


def traj(entries, shape):
    T = np.zeros(shape, dtype=np.int64)
    for (t, psi, a), count in entries.items():
        T[t, psi, a] = count
    return Trajectory(T)


def injected_bc(vec):
    vec = np.asarray(vec, dtype=np.int64)
    zero = np.zeros_like(vec)

    def log_prob(occ):
        return 0.0 if np.array_equal(occ, zero) else float("-inf")

    return BoundaryConditions(
        start_state_log_prob=log_prob,
        start_state_sampler=lambda rng: zero.copy(),
        injections={0: vec},
        start_state_enumerator=lambda: [zero.copy()],
    )


class TestStateAfter:
    def test_right_cat_moves_left(self, cat_mouse):
        spec, _ = cat_mouse
        bc = injected_bc([0, 1, 0, 0])
        T = traj({(0, RIGHT_CAT, MOVE): 1}, (1, 4, 2))
        assert state_after(spec, T, bc, 1).tolist() == [1, 0, 0, 0]

    def test_zero_injections_at_t0(self, cat_mouse):
        spec, bc = cat_mouse
        T = traj({}, (1, 4, 2))
        assert state_after(spec, T, bc, 0).tolist() == [0, 0, 0, 0]

    def test_cat_and_mouse_timestep(self, cat_mouse):
        # One right-cat moves, one left-mouse stays: F(1,0) + F(2,1).
        spec, bc = cat_mouse
        T = traj({(0, RIGHT_CAT, MOVE): 1, (0, LEFT_MOUSE, STAY): 1}, (1, 4, 2))
        assert state_after(spec, T, bc, 1).tolist() == [1, 0, 1, 0]


class TestContinuity:
    def test_single_timestep_matching_injections(self, cat_mouse):
        spec, _ = cat_mouse
        bc = injected_bc([0, 1, 0, 0])
        T = traj({(0, RIGHT_CAT, MOVE): 1}, (1, 4, 2))
        assert is_continuous(spec, T, bc)

    def test_two_step_chain(self, cat_mouse):
        spec, bc = cat_mouse
        T = traj(
            {(0, RIGHT_CAT, MOVE): 1, (0, LEFT_MOUSE, STAY): 1,
             (1, LEFT_CAT, STAY): 1, (1, LEFT_MOUSE, MOVE): 1},
            (2, 4, 2),
        )
        assert is_continuous(spec, T, bc)

    def test_vanishing_agents(self, cat_mouse):
        spec, bc = cat_mouse
        T = traj({(0, RIGHT_CAT, MOVE): 1, (0, LEFT_MOUSE, STAY): 1}, (2, 4, 2))
        assert not is_continuous(spec, T, bc)

    def test_actors_below_injections(self, cat_mouse):
        spec, _ = cat_mouse
        bc = injected_bc([0, 1, 0, 0])
        T = traj({}, (1, 4, 2))
        assert not is_continuous(spec, T, bc)


class TestSimulate:
    def test_empty_start_gives_zero_trajectory(self, cat_mouse):
        spec, _ = cat_mouse
        bc = fixed_start_bc([0, 0, 0, 0], 4)
        T = simulate(spec, bc, 3, np.random.default_rng(0))
        assert not T.tensor.any()

    def test_cat_move_frequency(self, cat_mouse):
        spec, _ = cat_mouse
        bc = fixed_start_bc([0, 1, 0, 0], 4)
        rng = np.random.default_rng(7)
        moves = sum(simulate(spec, bc, 1, rng).tensor[0, RIGHT_CAT, MOVE] for _ in range(10_000))
        assert abs(moves / 10_000 - 0.5) < 0.01

    def test_sampled_actions_have_positive_probability(self, cat_mouse):
        spec, bc = cat_mouse
        rng = np.random.default_rng(3)
        for _ in range(50):
            T = simulate(spec, bc, 2, rng)
            for t in range(2):
                occ = T.row_sums(t)
                for psi, a in zip(*np.nonzero(T.tensor[t])):
                    assert spec.agent_timestep(int(psi), occ, int(a)) > 0

    def test_simulate_outputs_are_continuous_with_finite_forecast(self, cat_mouse):
        spec, bc = cat_mouse
        rng = np.random.default_rng(11)
        for _ in range(200):
            T = simulate(spec, bc, 3, rng)
            assert is_continuous(spec, T, bc)
            assert forecast_log_prob(spec, T, bc) > float("-inf")

    def test_non_normalized_timestep_rejected(self):
        import abmcmc

        F = np.zeros((1, 2, 1), dtype=np.int64)
        F[0, 0, 0] = 1
        F[0, 1, 0] = 1
        bad = abmcmc.AbmSpec(1, 2, lambda psi, occ, a: 0.4, F)
        bc = fixed_start_bc([1], 1)
        with pytest.raises(NonNormalizedTimestep):
            simulate(bad, bc, 1, np.random.default_rng(0))


class TestForecast:
    def test_non_continuous_is_impossible(self, cat_mouse):
        spec, bc = cat_mouse
        T = traj({(0, RIGHT_CAT, MOVE): 1, (0, LEFT_MOUSE, STAY): 1}, (2, 4, 2))
        assert forecast_log_prob(spec, T, bc) == float("-inf")

    def test_single_right_cat_moving(self, cat_mouse):
        spec, bc = cat_mouse
        T = traj({(0, RIGHT_CAT, MOVE): 1}, (1, 4, 2))
        assert forecast_log_prob(spec, T, bc) == pytest.approx(math.log(0.03125), abs=1e-12)

    def test_two_agent_binomial_term(self):
        spec = two_action_pair_spec()
        bc = fixed_start_bc([2], 1)
        T = traj({(0, 0, 0): 1, (0, 0, 1): 1}, (1, 1, 2))
        assert forecast_log_prob(spec, T, bc) == pytest.approx(math.log(0.5), abs=1e-12)

    def test_zero_probability_action(self, cat_mouse):
        spec, bc = cat_mouse
        # A lone mouse with no cats cannot move.
        T = traj({(0, LEFT_MOUSE, MOVE): 1}, (1, 4, 2))
        assert forecast_log_prob(spec, T, bc) == float("-inf")


class TestPosterior:
    def test_violating_observation_support(self, worked_example):
        spec, bc, obs = worked_example
        T = traj({(0, LEFT_CAT, STAY): 1, (1, LEFT_CAT, MOVE): 1}, (2, 4, 2))
        # At t=1 the cat is still on the left, so this actually matches; push it right.
        T2 = traj({(0, LEFT_CAT, MOVE): 1, (1, RIGHT_CAT, STAY): 1}, (2, 4, 2))
        assert posterior_log_prob(spec, T2, obs, bc) == float("-inf")
        assert posterior_log_prob(spec, T, obs, bc) > float("-inf")

    def test_noiseless_match_equals_forecast(self, worked_example):
        spec, bc, obs = worked_example
        T = traj({(0, LEFT_CAT, STAY): 1, (1, LEFT_CAT, STAY): 1}, (2, 4, 2))
        assert posterior_log_prob(spec, T, obs, bc) == forecast_log_prob(spec, T, bc)

    def test_empty_observation_set(self, cat_mouse):
        spec, bc = cat_mouse
        rng = np.random.default_rng(5)
        for _ in range(20):
            T = simulate(spec, bc, 2, rng)
            assert posterior_log_prob(spec, T, [], bc) == forecast_log_prob(spec, T, bc)

    def test_additivity_over_observations(self, cat_mouse):
        spec, bc = cat_mouse
        rng = np.random.default_rng(13)
        T = simulate(spec, bc, 2, rng)
        obs = [cat_left_observation(spec, bc, time=t, count=int(T.row_sums(t)[LEFT_CAT])) for t in (0, 1)]
        lik = sum(o.log_likelihood(T) for o in obs)
        assert posterior_log_prob(spec, T, obs, bc) == pytest.approx(
            forecast_log_prob(spec, T, bc) + lik, abs=1e-12
        )


class TestEnumeratePosterior:
    def test_observation_holds_on_every_trajectory(self, worked_example):
        spec, bc, obs = worked_example
        results = enumerate_posterior(spec, bc, obs, 2, fermionic=True)
        assert results
        for T, _ in results:
            assert T.row_sums(1)[LEFT_CAT] == 1

    def test_impossible_observation_gives_empty_support(self, cat_mouse):
        spec, bc = cat_mouse
        obs = [cat_left_observation(spec, bc, time=1, count=5)]
        assert enumerate_posterior(spec, bc, obs, 2, fermionic=True) == []

    def test_probabilities_sum_to_one(self, worked_example):
        spec, bc, obs = worked_example
        results = enumerate_posterior(spec, bc, obs, 2, fermionic=True)
        assert abs(sum(p for _, p in results) - 1.0) < 1e-12

    def test_probabilities_proportional_to_posterior(self, worked_example):
        spec, bc, obs = worked_example
        results = enumerate_posterior(spec, bc, obs, 2, fermionic=True)
        offsets = [math.log(p) - posterior_log_prob(spec, T, obs, bc) for T, p in results]
        assert max(offsets) - min(offsets) < 1e-9

    def test_ceiling(self, worked_example):
        spec, bc, obs = worked_example
        with pytest.raises(EnumerationLimitExceeded):
            enumerate_posterior(spec, bc, obs, 2, fermionic=True, ceiling=3)

    def test_simulation_frequencies_match_forecast(self, cat_mouse):
        spec, bc = cat_mouse
        rng = np.random.default_rng(29)
        tallies = {}
        n = 100_000
        for _ in range(n):
            key = simulate(spec, bc, 2, rng).key()
            tallies[key] = tallies.get(key, 0) + 1
        results = enumerate_posterior(spec, bc, [], 2, fermionic=False, ceiling=10_000_000)
        probs = {T.key(): p for T, p in results}
        checked = 0
        for key, count in tallies.items():
            p = probs[key]
            if p < 1e-4:
                continue
            sigma = math.sqrt(n * p * (1 - p))
            assert abs(count - n * p) < 3 * sigma + 1e-9
            checked += 1
        assert checked > 10


def test_trajectory_csv_round_trip(cat_mouse):
    spec, bc = cat_mouse
    T = simulate(spec, bc, 3, np.random.default_rng(2))
    text = T.to_csv()
    assert text.splitlines()[0] == "t,psi,a,count"
    back = Trajectory.from_csv(text, 3, 4, 2)
    assert np.array_equal(back.tensor, T.tensor)


def test_occupancy_csv_header(cat_mouse):
    spec, bc = cat_mouse
    T = simulate(spec, bc, 2, np.random.default_rng(2))
    assert occupancy_csv(spec, T, bc).splitlines()[0] == "t,psi,count"
