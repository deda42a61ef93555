import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from abmcmc import (
    LinearConstraint,
    assemble,
    build_factorized,
    calibrate_multinomial,
    constraint_factors,
    enumerate_posterior,
    flatten_point,
    infeasibility,
    lift,
    log_tilde_p,
    markov_log_prob,
    multinomial_factors,
    posterior_log_prob,
    reduce,
)
from abmcmc.basis import nonbasic_coordinates
from abmcmc.factors import DEFAULT_RATE_FLOOR, count_action_log, count_rowsum_log
from abmcmc.models import PredatorPreyParams, build_predator_prey
from abmcmc.models.predprey import DIE_ACTION, PREDATOR


class TestInfeasibility:
    def test_inside(self):
        assert infeasibility(0.0, 0.5, 1.0) == 0.0

    def test_below(self):
        assert infeasibility(0.0, -2.0, 1.0) == 2.0

    def test_above(self):
        assert infeasibility(0.0, 3.0, 1.0) == 2.0

    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
    def test_non_negative_and_zero_inside(self, a, b, x):
        lo, hi = min(a, b), max(a, b)
        v = infeasibility(lo, x, hi)
        assert v >= 0.0
        assert (v == 0.0) == (lo <= x <= hi)


class TestConstraintFactors:
    def test_boundary_value_is_zero(self):
        (f,) = constraint_factors([LinearConstraint({0: Fraction(1)}, Fraction(0), Fraction(1))], 0.1)
        assert f.eval_log(1.0) == 0.0
        assert f.eval_log(0.0) == 0.0

    def test_unit_violation_at_tau_tenth(self):
        (f,) = constraint_factors([LinearConstraint({0: Fraction(1)}, Fraction(0), Fraction(1))], 0.1)
        assert f.eval_log(2.0) == pytest.approx(-10.0, abs=1e-12)

    def test_interior_product_is_zero(self):
        rows = [
            LinearConstraint({0: Fraction(1), 1: Fraction(1)}, None, Fraction(3)),
            LinearConstraint({0: Fraction(1)}, Fraction(0), None),
        ]
        fs = constraint_factors(rows, 0.5)
        assert sum(f.eval_log(f.argument([1.0, 1.0])) for f in fs) == 0.0

    def test_positive_temperature_required(self):
        with pytest.raises(ValueError):
            constraint_factors([], 0.0)


@pytest.fixture(scope="module")
def worked_problem(worked_example):
    spec, bc, obs = worked_example
    poly = assemble(spec, bc, obs, 2, fermionic=True)
    reduction = reduce(poly)
    rates = calibrate_multinomial(spec, bc, 2, 3000, np.random.default_rng(17))
    fd = build_factorized(reduction, rates, tau=0.1)
    return spec, bc, obs, poly, reduction, rates, fd


class TestCalibration:
    def test_context_independent_actions_are_exact(self, worked_problem):
        spec, bc, obs, poly, reduction, rates, fd = worked_problem
        # Cat actions carry probability 1/2 in every occupancy context.
        for t in range(2):
            for psi in (0, 1):
                for a in (0, 1):
                    if rates.visited[t, psi, a]:
                        assert rates.log_rates[t, psi, a] == pytest.approx(math.log(0.5), abs=1e-12)
        assert rates.visited[0, 0, 0]

    def test_unvisited_cells_take_the_floor(self, worked_problem):
        spec, bc, obs, poly, reduction, rates, fd = worked_problem
        assert ((rates.log_rates == DEFAULT_RATE_FLOOR) == ~rates.visited).all()

    def test_constant_rate_action_on_predator_prey(self):
        params = PredatorPreyParams(grid_width=4, grid_height=4, timesteps=2)
        spec, bc = build_predator_prey(params)
        rates = calibrate_multinomial(spec, bc, 2, 300, np.random.default_rng(3))
        die = rates.log_rates[:, : params.num_cells, DIE_ACTION]
        visited = rates.visited[:, : params.num_cells, DIE_ACTION]
        assert visited.any()
        assert die[visited] == pytest.approx(math.log(0.1), abs=1e-12)

    def test_csv_dump(self, worked_problem):
        rates = worked_problem[5]
        text = rates.to_csv()
        assert text.splitlines()[0] == "t,psi,a,log_pi_tilde"
        assert len(text.splitlines()) == 1 + 2 * 4 * 2


class TestMultinomialFactors:
    def test_zero_count_contributes_nothing(self):
        assert count_action_log(0.0, math.log(0.3), 1.0) == 0.0

    def test_two_count_value(self):
        assert count_action_log(2.0, math.log(0.5), 4.0) == pytest.approx(
            2 * math.log(0.5) - math.log(2.0), abs=1e-12
        )

    def test_single_agent_cell_matches_true_multinomial(self, worked_problem):
        spec, bc, obs, poly, reduction, rates, fd = worked_problem
        # A lone right-cat moving: one agent in the cell, so the cell's
        # factors sum to log(1!) + log(rate) - log(1!) = log(rate), the
        # exact multinomial term when the calibrated rate equals pi.
        t, psi, a = 0, 1, 0
        cell = t * 4 + psi
        total = count_rowsum_log(1.0, 2.0) + count_action_log(1.0, rates.log_rates[t, psi, a], 1.0)
        occ = np.array([0, 1, 0, 0])
        expected = math.log(spec.agent_timestep(psi, occ, a))
        assert total == pytest.approx(expected, abs=1e-12)

    def test_factor_rows_cover_all_cells(self, worked_problem):
        *_, reduction, rates, fd = worked_problem[3:]
        mfs = multinomial_factors(rates, reduction)
        assert len(mfs) == 2 * 4 * (1 + 2)


class TestLogTildeP:
    def test_feasible_point_has_no_constraint_contribution(self, worked_example, worked_problem):
        spec, bc, obs = worked_example
        _, _, _, poly, reduction, rates, fd = worked_problem
        for T, _ in enumerate_posterior(spec, bc, obs, 2, fermionic=True)[:5]:
            x_n = [float(v) for v in nonbasic_coordinates(reduction, flatten_point(T, poly))]
            total = log_tilde_p(fd, x_n)
            count_part = sum(
                f.eval_log(f.argument(x_n)) for f in fd.factors if f.kind != "constraint"
            )
            assert total == pytest.approx(count_part, abs=1e-12)

    def test_single_violation_costs_iota_over_tau(self):
        (f,) = constraint_factors([LinearConstraint({0: Fraction(1)}, None, Fraction(0))], 0.1)
        assert f.eval_log(1.0) == pytest.approx(-10.0, abs=1e-12)

    def test_temperature_limit_slope_is_total_infeasibility(self, worked_example, worked_problem):
        spec, bc, obs = worked_example
        _, _, _, poly, reduction, rates, _ = worked_problem
        rng = np.random.default_rng(23)
        x_n = [float(rng.integers(0, 2)) for _ in range(reduction.num_nonbasic)]
        full = [float(v) for v in lift(reduction, x_n)]
        iota_total = 0.0
        for c in list(reduction.reduced_constraints):
            val = sum(float(co) * x_n[i] for i, co in c.coeffs.items())
            lo = -math.inf if c.lower is None else float(c.lower)
            hi = math.inf if c.upper is None else float(c.upper)
            iota_total += infeasibility(lo, val, hi)
        for b, h in zip(reduction.basic_indices, reduction.h_basic):
            iota_total += infeasibility(0.0, full[b], float(h))
        lp1 = log_tilde_p(build_factorized(reduction, worked_problem[5], 0.1), x_n)
        lp2 = log_tilde_p(build_factorized(reduction, worked_problem[5], 0.05), x_n)
        assert lp2 - lp1 == pytest.approx(-iota_total * (20.0 - 10.0), abs=1e-9)

    def test_touch_index_localizes_changes(self, worked_problem):
        *_, reduction, rates, fd = worked_problem[3:]
        rng = np.random.default_rng(31)
        n = reduction.num_nonbasic
        x = [float(rng.integers(0, 2)) for _ in range(n)]
        base_args = {fid: f.argument(x) for fid, f in enumerate(fd.factors)}
        total0 = log_tilde_p(fd, x)
        for k in range(n):
            x2 = list(x)
            x2[k] += 1.0
            touched = set(fd.touch_index.get(k, []))
            delta = sum(
                fd.factors[fid].eval_log(fd.factors[fid].argument(x2))
                - fd.factors[fid].eval_log(base_args[fid])
                for fid in touched
            )
            assert log_tilde_p(fd, x2) - total0 == pytest.approx(delta, abs=1e-9)


def hybrid_oracle(spec, bc, obs, poly, reduction, rates, tau, x_n):
    """Independent evaluation of the infeasible-state value (test-side)."""
    full = [float(v) for v in lift(reduction, x_n)]
    idx = reduction.indexer
    N, S, A = idx.num_timesteps, idx.num_states, idx.num_actions
    traj = np.array(full[: idx.num_trajectory_vars]).reshape(N, S, A)
    total = 0.0
    for t in range(N):
        occ = traj[t].sum(axis=1)
        for psi in range(S):
            counts = traj[t, psi]
            if not counts.any():
                continue
            exact = None
            if (counts >= 0).all():
                val = math.lgamma(occ[psi] + 1.0)
                ok = True
                for a in np.nonzero(counts)[0]:
                    prob = spec.agent_timestep(psi, occ, int(a))
                    if prob <= 0:
                        ok = False
                        break
                    val += counts[a] * math.log(prob) - math.lgamma(counts[a] + 1.0)
                if ok:
                    exact = val
            if exact is not None:
                total += exact
            else:
                hs = sum(float(poly.box[idx.flatten(t, psi, a)]) for a in range(A))
                total += count_rowsum_log(occ[psi], hs)
                for a in range(A):
                    total += count_action_log(
                        counts[a], rates.log_rates[t, psi, a], float(poly.box[idx.flatten(t, psi, a)])
                    )
    start = traj[0].sum(axis=1) - bc.injection(0, S)
    sv = bc.start_state_log_prob(start) if (start >= 0).all() else -math.inf
    if sv > -math.inf:
        total += sv
    elif bc.start_state_approx_log_prob is not None:
        total += bc.start_state_approx_log_prob(start)
    penalty = 0.0
    for c in poly.constraints:
        val = sum(float(co) * full[i] for i, co in c.coeffs.items())
        lo = -math.inf if c.lower is None else float(c.lower)
        hi = math.inf if c.upper is None else float(c.upper)
        penalty += infeasibility(lo, val, hi)
    for b, h in zip(reduction.basic_indices, reduction.h_basic):
        penalty += infeasibility(0.0, full[b], float(h))
    return total - penalty / tau


class TestMarkovLogProb:
    def test_exact_on_every_enumerated_trajectory(self, worked_example, worked_problem):
        spec, bc, obs = worked_example
        _, _, _, poly, reduction, rates, fd = worked_problem
        for T, _ in enumerate_posterior(spec, bc, obs, 2, fermionic=True):
            x_n = nonbasic_coordinates(reduction, flatten_point(T, poly))
            value, feasible = markov_log_prob(spec, bc, obs, reduction, fd, x_n)
            assert feasible
            assert value == posterior_log_prob(spec, T, obs, bc)

    def test_hybrid_matches_independent_oracle(self, worked_example, worked_problem):
        spec, bc, obs = worked_example
        _, _, _, poly, reduction, rates, fd = worked_problem
        rng = np.random.default_rng(41)
        checked_infeasible = 0
        for _ in range(60):
            x_n = [int(rng.integers(0, 2)) for _ in range(reduction.num_nonbasic)]
            value, feasible = markov_log_prob(spec, bc, obs, reduction, fd, x_n)
            full = lift(reduction, x_n)
            exact_feasible = poly.contains(full)
            if exact_feasible:
                from abmcmc import Trajectory

                T = Trajectory(
                    np.array([int(v) for v in full[:16]], dtype=np.int64).reshape(2, 4, 2)
                )
                exact_feasible = posterior_log_prob(spec, T, obs, bc) > -math.inf
            assert feasible == exact_feasible
            if not feasible:
                oracle = hybrid_oracle(spec, bc, obs, poly, reduction, rates, 0.1, x_n)
                assert value == pytest.approx(oracle, abs=1e-9)
                checked_infeasible += 1
        assert checked_infeasible > 10
