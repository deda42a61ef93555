import math

import numpy as np
import pytest

from abmcmc import (
    SumTree,
    acceptance_prob,
    available_backends,
    compile_problem,
    initialize,
    make_engine,
    markov_log_prob,
    propose,
    run_chain,
    sumtree_draw,
    sumtree_update,
    valid_perturbations,
)
from abmcmc.models import cat_left_observation
from abmcmc.models.catmouse import LEFT_CAT
from abmcmc.sampler import ChainConfig


@pytest.fixture(scope="module")
def cm_problem(worked_example):
    # Temperature per the operating rule of thumb: high enough that the
    # chain spends a sizable fraction of its time crossing infeasible
    # valleys (the barriers between feasible modes on this small model).
    spec, bc, obs = worked_example
    return compile_problem(
        spec, bc, obs, num_timesteps=2, fermionic=True, tau=0.6,
        calibration_rng=np.random.default_rng(100), num_prior_samples=3000,
    )


class TestSumTree:
    def test_single_positive_leaf_always_drawn(self):
        tree = SumTree(4)
        sumtree_update(tree, 0, 1.0)
        rng = np.random.default_rng(0)
        assert all(sumtree_draw(tree, rng) == 0 for _ in range(100))

    def test_draw_proportional_to_weights(self):
        tree = SumTree(3)
        for leaf, w in enumerate((1.0, 1.0, 2.0)):
            tree.update(leaf, w)
        rng = np.random.default_rng(1)
        n = 100_000
        hits = np.zeros(3)
        for _ in range(n):
            hits[tree.draw(rng)] += 1
        sigma = math.sqrt(n * 0.5 * 0.5)
        assert abs(hits[2] - 0.5 * n) < 3 * sigma

    def test_update_reflects_in_total(self):
        tree = SumTree(5)
        for leaf in range(5):
            tree.update(leaf, float(leaf))
        assert tree.total() == 10.0
        tree.update(3, 0.5)
        assert tree.total() == 7.5

    def test_chi_square_over_sixteen_leaves(self):
        rng = np.random.default_rng(5)
        weights = rng.random(16) + 0.05
        tree = SumTree(16)
        for leaf, w in enumerate(weights):
            tree.update(leaf, float(w))
        n = 100_000
        hits = np.zeros(16)
        for _ in range(n):
            hits[tree.draw(rng)] += 1
        expected = weights / weights.sum() * n
        chi2 = float(((hits - expected) ** 2 / expected).sum())
        # 15 dof: P(chi2 > 37.7) ~ 0.001
        assert chi2 < 37.7

    def test_zero_total_draw_rejected(self):
        tree = SumTree(2)
        with pytest.raises(ValueError):
            tree.draw(np.random.default_rng(0))


class TestValidPerturbations:
    def test_binary_boundaries(self):
        h = np.ones(3)
        mask = np.ones(3, dtype=bool)
        out = valid_perturbations(np.array([0.0, 1.0, 0.0]), h, mask)
        assert (0, 1) in out and (0, -1) not in out
        assert (1, -1) in out and (1, 1) not in out

    def test_interior_integer_dim(self):
        out = valid_perturbations(np.array([1.0]), np.array([2.0]), np.ones(1, dtype=bool))
        assert set(out) == {(0, -1), (0, 1)}

    def test_real_dim_rounds_half_to_even(self):
        out = valid_perturbations(np.array([0.5]), np.array([1.5]), np.zeros(1, dtype=bool))
        # 0.5 rounds to 0: only +1 staysinside [0, 1.5].
        assert set(out) == {(0, 1)}


class TestEngineConsistency:
    def test_matches_reference_probability_along_a_walk(self, cm_problem):
        rng = np.random.default_rng(7)
        engine, _ = initialize(cm_problem, rng)
        for step_no in range(400):
            engine.step(rng)
            if step_no % 20 == 0:
                x = engine.state_vector()
                value, feasible = markov_log_prob(
                    cm_problem.spec, cm_problem.bc, cm_problem.observations,
                    cm_problem.reduction, cm_problem.fd, x,
                )
                assert feasible == engine.is_feasible()
                assert engine.log_prob() == pytest.approx(value, abs=1e-9)

    def test_incremental_caches_match_fresh_engine(self, cm_problem):
        rng = np.random.default_rng(11)
        engine, _ = initialize(cm_problem, rng)
        for _ in range(50):
            for _ in range(40):
                engine.step(rng)
            fresh = make_engine(cm_problem.engine_problem)
            fresh.set_state(engine.state_vector())
            np.testing.assert_allclose(engine.weights(), fresh.weights(), atol=1e-9)
            assert engine.proposal_total() == pytest.approx(fresh.proposal_total(), abs=1e-9)
            assert engine.log_prob() == pytest.approx(fresh.log_prob(), abs=1e-9)

    def test_rejected_step_leaves_state_bit_identical(self):
        # A biased start is not captured by the factorized target, so the
        # acceptance correction actually rejects some proposals here.
        from abmcmc.models import build_cat_mouse

        spec, bc = build_cat_mouse(occupancy_prob=0.25)
        obs = [cat_left_observation(spec, bc)]
        problem = compile_problem(
            spec, bc, obs, num_timesteps=2, fermionic=True, tau=0.1,
            calibration_rng=np.random.default_rng(2), num_prior_samples=1500,
        )
        rng = np.random.default_rng(13)
        engine, _ = initialize(problem, rng)
        rejected_seen = 0
        for _ in range(600):
            before_x = engine.state_vector()
            before_w = engine.weights()
            before_lp = engine.log_prob()
            accepted, _ = engine.step(rng)
            if not accepted:
                rejected_seen += 1
                assert np.array_equal(engine.state_vector(), before_x)
                assert np.array_equal(engine.weights(), before_w)
                assert engine.log_prob() == before_lp
        assert rejected_seen > 5

    def test_recorded_samples_are_feasible_posterior_points(self, cm_problem):
        rng = np.random.default_rng(17)
        engine, _ = initialize(cm_problem, rng)
        from abmcmc import Trajectory, posterior_log_prob
        from fractions import Fraction
        from abmcmc.basis import lift

        for _ in range(500):
            _, feasible = engine.step(rng)
            if feasible:
                x = engine.state_vector()
                exact = lift(cm_problem.reduction, [Fraction(int(v)) for v in x])
                assert cm_problem.polyhedron.contains(exact)
                T = Trajectory(np.array([int(v) for v in exact[:16]]).reshape(2, 4, 2))
                assert posterior_log_prob(cm_problem.spec, T, cm_problem.observations, cm_problem.bc) > -math.inf


class TestProposalMechanics:
    def test_propose_matches_weight_distribution(self, cm_problem):
        rng = np.random.default_rng(19)
        engine, _ = initialize(cm_problem, rng)
        w = engine.weights()
        probs = w / w.sum()
        n = 20_000
        hits = np.zeros(len(w))
        for _ in range(n):
            pert, _ = propose(engine, rng)
            leaf = 2 * pert.index + (1 if pert.direction == 1 else 0)
            hits[leaf] += 1
        for leaf in np.nonzero(probs > 0.02)[0]:
            sigma = math.sqrt(n * probs[leaf] * (1 - probs[leaf]))
            assert abs(hits[leaf] - n * probs[leaf]) < 4 * sigma + 1e-9

    def test_acceptance_prob_is_one_for_symmetric_states(self, cm_problem):
        rng = np.random.default_rng(23)
        engine, _ = initialize(cm_problem, rng)
        # alpha * alpha_reverse detailed-balance composition: walking a
        # proposal and back multiplies to min-form consistency; verified
        # through the reference evaluator on a sampled perturbation.
        pert, x_new = propose(engine, rng)
        alpha_fwd = acceptance_prob(cm_problem, engine, pert)
        prime = make_engine(cm_problem.engine_problem)
        prime.set_state(x_new)
        from abmcmc.sampler import Perturbation

        back = Perturbation(index=pert.index, direction=-pert.direction, fractional=0.0)
        alpha_rev = acceptance_prob(cm_problem, prime, back)
        # pi(x) P(x->x') alpha_fwd == pi(x') P(x'->x) alpha_rev (detailed balance)
        lhs = engine.log_prob() + math.log(
            engine.weights()[2 * pert.index + (1 if pert.direction == 1 else 0)]
        ) - math.log(engine.proposal_total()) + math.log(alpha_fwd)
        rhs = prime.log_prob() + math.log(
            prime.weights()[2 * pert.index + (1 if pert.direction == -1 else 0)]
        ) - math.log(prime.proposal_total()) + math.log(alpha_rev)
        assert lhs == pytest.approx(rhs, abs=1e-9)


class TestInitialize:
    def test_worked_example_reaches_feasibility(self, cm_problem):
        rng = np.random.default_rng(29)
        engine, used = initialize(cm_problem, rng)
        assert engine.is_feasible()
        lifted = engine.lifted()
        idx = cm_problem.reduction.indexer
        left_cats = lifted[idx.flatten(1, LEFT_CAT, 0)] + lifted[idx.flatten(1, LEFT_CAT, 1)]
        assert left_cats == 1.0

    def test_prior_feasible_start_returns_immediately(self, worked_example):
        from abmcmc import simulate

        spec, bc, _ = worked_example
        problem = compile_problem(
            spec, bc, [], num_timesteps=2, fermionic=True, tau=0.1,
            calibration_rng=np.random.default_rng(7), num_prior_samples=500,
        )
        # Without observations a prior draw is feasible exactly when it
        # happens to respect the one-agent-per-cell box.
        feasible_draws = 0
        for seed in range(8):
            prior = simulate(spec, bc, 2, np.random.default_rng(seed))
            _, used = initialize(problem, np.random.default_rng(seed))
            if (prior.tensor <= 1).all():
                assert used == 0
                feasible_draws += 1
            else:
                assert used > 0
        assert feasible_draws > 0

    def test_initial_cache_totals_are_consistent(self, cm_problem):
        engine, _ = initialize(cm_problem, np.random.default_rng(31))
        assert engine.proposal_total() == pytest.approx(float(engine.weights().sum()), rel=1e-12)


class TestRunChain:
    def test_thinning_one_records_all_feasible_states(self, cm_problem):
        config = ChainConfig(burn_in=100, samples=400, thinning=1, seed=37)
        result = run_chain(cm_problem, config, collect_lifted=True)
        assert result.recorded == result.steps - result.infeasible_steps
        assert len(result.samples) == result.recorded
        assert result.accepted <= result.steps

    def test_same_seed_is_bit_identical(self, cm_problem):
        config = ChainConfig(burn_in=50, samples=300, thinning=1, seed=41)
        a = run_chain(cm_problem, config, collect_lifted=True)
        b = run_chain(cm_problem, config, collect_lifted=True)
        assert a.steps == b.steps and a.accepted == b.accepted
        assert all(np.array_equal(x, y) for x, y in zip(a.samples, b.samples))

    def test_visit_frequencies_approach_enumerated_posterior(self, worked_example, cm_problem):
        from abmcmc import enumerate_posterior

        spec, bc, obs = worked_example
        exact = {T.key(): p for T, p in enumerate_posterior(spec, bc, obs, 2, fermionic=True)}
        tallies = {}

        def tally(x_full):
            key = np.asarray(x_full[:16], dtype=np.int64).tobytes()
            tallies[key] = tallies.get(key, 0) + 1

        config = ChainConfig(burn_in=2000, samples=200_000, thinning=1, seed=43)
        run_chain(cm_problem, config, collector=tally)
        total = sum(tallies.values())
        assert set(tallies) <= set(exact)
        tv = 0.5 * sum(abs(tallies.get(k, 0) / total - p) for k, p in exact.items())
        assert tv < 0.05


class TestCrossCore:
    @pytest.mark.skipif(len(available_backends()) < 2, reason="compiled core unavailable")
    def test_cores_walk_identical_chains(self, cm_problem):
        runs = {}
        for backend in ("compiled", "pure"):
            rng = np.random.default_rng(47)
            engine, _ = initialize(cm_problem, rng, backend=backend)
            trace = []
            for _ in range(800):
                accepted, feasible = engine.step(rng)
                trace.append((accepted, feasible))
            runs[backend] = (trace, engine.state_vector(), engine.weights(), engine.log_prob(), engine.proposal_total())
        t1, x1, w1, lp1, s1 = runs["compiled"]
        t2, x2, w2, lp2, s2 = runs["pure"]
        assert t1 == t2
        assert np.array_equal(x1, x2)
        assert np.array_equal(w1, w2)
        assert lp1 == lp2 and s1 == s2
