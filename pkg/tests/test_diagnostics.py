import math

import numpy as np
import pytest

from abmcmc import (
    RegionSet,
    Trajectory,
    autocorrelation,
    effective_samples,
    gelman_rubin,
    occupancy_expectation,
    summary_statistics,
)
from abmcmc.diagnostics import DegenerateSequencesError, autocorrelation_curve


def direct_var_plus(seqs):
    """Textbook loop implementation, kept independent of the package's."""
    m = len(seqs)
    n = len(seqs[0])
    means = [sum(s) / n for s in seqs]
    grand = sum(means) / m
    w = sum(sum((x - mu) ** 2 for x in s) / (n - 1) for s, mu in zip(seqs, means)) / m
    b = n / (m - 1) * sum((mu - grand) ** 2 for mu in means)
    return w, b, (n - 1) / n * w + b / n


def direct_rhat(seqs):
    w, _, vp = direct_var_plus(seqs)
    return math.sqrt(vp / w)


def direct_rho(seqs, t):
    _, _, vp = direct_var_plus(seqs)
    n = len(seqs[0])
    vts = []
    for s in seqs:
        vts.append(sum((s[i] - s[i + t]) ** 2 for i in range(n - t)) / (n - t) if t else 0.0)
    return 1.0 - (sum(vts) / len(vts)) / (2.0 * vp)


def direct_ess(seqs):
    m, n = len(seqs), len(seqs[0])
    total = 0.0
    for t in range(n):
        rho = direct_rho(seqs, t)
        if rho <= 0.0:
            break
        total += rho
    return m * n / (1.0 + 2.0 * total)


class TestHandDerivedFixture:
    SEQS = [np.array([0.0, 2.0]), np.array([1.0, 3.0])]

    def test_rhat(self):
        assert gelman_rubin(self.SEQS) == pytest.approx(math.sqrt(0.75), abs=1e-15)

    def test_rho_zero_is_one(self):
        assert autocorrelation(self.SEQS, 0) == 1.0

    def test_rho_one(self):
        assert autocorrelation(self.SEQS, 1) == pytest.approx(-1.0 / 3.0, abs=1e-15)

    def test_effective_samples(self):
        assert effective_samples(self.SEQS) == pytest.approx(4.0 / 3.0, abs=1e-15)


class TestAgainstDirectImplementation:
    @pytest.mark.parametrize("seed", range(10))
    def test_all_four_statistics(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 5))
        n = int(rng.integers(5, 60))
        seqs = [rng.normal(size=n) * rng.uniform(0.5, 3) + rng.normal() for _ in range(m)]
        assert gelman_rubin(seqs) == pytest.approx(direct_rhat(seqs), abs=1e-12)
        for t in (0, 1, n // 2, n - 1):
            assert autocorrelation(seqs, t) == pytest.approx(direct_rho(seqs, t), abs=1e-12)
        assert effective_samples(seqs) == pytest.approx(direct_ess(seqs), abs=1e-12)


class TestInvariances:
    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        seqs = [rng.normal(size=200) for _ in range(3)]
        shifted = [s + 17.5 for s in seqs]
        assert gelman_rubin(shifted) == pytest.approx(gelman_rubin(seqs), abs=1e-9)

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        seqs = [rng.normal(size=200) for _ in range(3)]
        scaled = [s * 4.25 for s in seqs]
        assert gelman_rubin(scaled) == pytest.approx(gelman_rubin(seqs), abs=1e-9)

    def test_iid_sequences_approach_one(self):
        rng = np.random.default_rng(5)
        seqs = [rng.normal(size=10_000) for _ in range(4)]
        assert abs(gelman_rubin(seqs) - 1.0) < 0.05

    def test_iid_lag_one_autocorrelation_is_small(self):
        rng = np.random.default_rng(6)
        n = 20_000
        seqs = [rng.normal(size=n) for _ in range(2)]
        assert abs(autocorrelation(seqs, 1)) < 3.0 / math.sqrt(2 * n)

    def test_rho_zero_is_one_whenever_variance_positive(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            seqs = [rng.normal(size=30) for _ in range(2)]
            assert autocorrelation(seqs, 0) == 1.0

    def test_alternating_sequences_stop_the_sum_immediately(self):
        half = np.array([1.0, -1.0] * 50)
        seqs = [half, -half]
        m, n = 2, 100
        assert effective_samples(seqs) == pytest.approx(m * n / 3.0, abs=1e-9)

    def test_degenerate_sequences_raise(self):
        with pytest.raises(DegenerateSequencesError):
            gelman_rubin([np.ones(10), np.ones(10)])


class TestShapeRules:
    def test_unequal_lengths_rejected(self):
        with pytest.raises(ValueError):
            gelman_rubin([np.zeros(5), np.zeros(6)])

    def test_single_sequence_rejected(self):
        with pytest.raises(ValueError):
            gelman_rubin([np.arange(5.0)])

    def test_lag_bounds(self):
        seqs = [np.arange(5.0), np.arange(5.0) + 1]
        with pytest.raises(ValueError):
            autocorrelation(seqs, 5)

    def test_curve_matches_pointwise(self):
        rng = np.random.default_rng(8)
        seqs = [rng.normal(size=50) for _ in range(2)]
        curve = autocorrelation_curve(seqs, [0, 1, 2, 3])
        for t, v in enumerate(curve):
            assert v == autocorrelation(seqs, t)


class TestSummaryStatistics:
    def test_regions_on_cat_mouse(self, cat_mouse):
        spec, bc = cat_mouse
        T = Trajectory(np.zeros((1, 4, 2), dtype=np.int64))
        regions = RegionSet.from_state_groups([np.arange(4), np.array([0, 1])])
        assert summary_statistics(spec, bc, T, regions).tolist() == [0.0, 0.0]

    def test_whole_grid_counts_everything(self, cat_mouse):
        spec, bc = cat_mouse
        tensor = np.zeros((1, 4, 2), dtype=np.int64)
        tensor[0, 0, 1] = 1  # left cat stays
        tensor[0, 2, 1] = 1  # left mouse stays
        T = Trajectory(tensor)
        regions = RegionSet.from_state_groups([np.arange(4)])
        assert summary_statistics(spec, bc, T, regions).tolist() == [2.0]

    def test_nested_regions_are_non_increasing(self, cat_mouse):
        spec, bc = cat_mouse
        rng = np.random.default_rng(9)
        from abmcmc import simulate

        regions = RegionSet.from_state_groups([np.arange(4), np.array([0, 2]), np.array([0])])
        for _ in range(20):
            T = simulate(spec, bc, 2, rng)
            vals = summary_statistics(spec, bc, T, regions)
            assert vals[0] >= vals[1] >= vals[2]

    def test_occupancy_expectation(self):
        occs = [np.array([0.0, 2.0]), np.array([2.0, 0.0])]
        assert occupancy_expectation(occs).tolist() == [1.0, 1.0]
        with pytest.raises(ValueError):
            occupancy_expectation([])
