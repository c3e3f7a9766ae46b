import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bell_lab.analysis import chsh, pair_coincidences
from bell_lab.apparatus import run_experiment
from bell_lab import lhvopt
from bell_lab.core import BellLabError
from bell_lab.lhvopt import (
    InfeasibleEfficiencyError,
    QUANTUM_S,
    conditional_chsh,
    critical_efficiency,
    max_chsh_at_efficiency,
    realize_adversary,
    scan_efficiency,
    solve_fallback,
    solve_lp,
)
from bell_lab.sources import guess_mixture_chsh, guess_mixture_weights
from bell_lab.strategies import (
    ALL_PLUS_INDEX,
    FULL_DETECTION_INDICES,
    STRATEGIES,
    enumerate_strategies,
    strategy_index,
)

GRID = [round(0.55 + 0.05 * i, 2) for i in range(10)]


def closed_form(eta):
    return min(4.0, 4.0 / eta - 2.0)


def point_mass(index, one=1):
    w = [0] * 81
    w[index] = one
    return w


class TestEnumeration:
    def test_counts(self):
        strategies = enumerate_strategies()
        assert len(strategies) == 81
        assert sum(s.full_detection for s in strategies) == 16
        assert sum(all(v == 0 for v in s.alice_map) for s in strategies) == 9
        assert len(FULL_DETECTION_INDICES) == 16

    def test_index_is_canonical(self):
        for i, s in enumerate(STRATEGIES):
            assert s.index == i == strategy_index(s.alice_map, s.bob_map)
        assert STRATEGIES[ALL_PLUS_INDEX].alice_map == (1, 1)


class TestConditionalChsh:
    def test_all_plus(self):
        assert conditional_chsh(point_mass(ALL_PLUS_INDEX)) == 2

    def test_guess_embedding_exact(self):
        w = [Fraction(x).limit_denominator(64) for x in guess_mixture_weights(1.0)]
        assert sum(w) == 1
        assert conditional_chsh(w) == 4

    def test_uniform_full_detection_cancels(self):
        w = [Fraction(0)] * 81
        for i in FULL_DETECTION_INDICES:
            w[int(i)] = Fraction(1, 16)
        assert conditional_chsh(w) == 0

    def test_undefined_when_no_coincidence(self):
        never = strategy_index((0, 0), (1, 1))
        assert conditional_chsh(point_mass(never)) is None

    def test_rejects_non_simplex(self):
        with pytest.raises(ValueError):
            conditional_chsh([0.5] * 81)
        with pytest.raises(ValueError):
            conditional_chsh([1.0])

    @given(st.lists(st.integers(0, 20), min_size=16, max_size=16).filter(any))
    def test_full_detection_mixtures_obey_bell_bound(self, raw):
        total = sum(raw)
        w = [Fraction(0)] * 81
        for i, r in zip(FULL_DETECTION_INDICES, raw):
            w[int(i)] = Fraction(r, total)
        s = conditional_chsh(w)
        assert -2 <= s <= 2


class TestMaxChsh:
    def test_full_detection(self):
        assert max_chsh_at_efficiency(1.0).s_max == pytest.approx(2.0, abs=1e-9)

    def test_algebraic_cap(self):
        assert max_chsh_at_efficiency(2 / 3).s_max == pytest.approx(4.0, abs=1e-6)

    def test_at_threshold(self):
        res = max_chsh_at_efficiency(0.8284)
        assert res.s_max == pytest.approx(2.828, abs=1e-2)
        assert conditional_chsh(res.argmax) == pytest.approx(res.s_max, abs=1e-6)

    def test_grid_properties(self):
        results = scan_efficiency(GRID)
        values = [r.s_max for r in results]
        assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))
        for eta, r in zip(GRID, results):
            assert not r.flagged
            assert abs(r.s_lp - r.s_fallback) < 1e-2
            assert r.s_lp == pytest.approx(closed_form(eta), abs=1e-2)
            assert r.s_fallback == pytest.approx(closed_form(eta), abs=1e-2)
            assert r.s_max >= guess_mixture_chsh(2 * (1 - eta)) - 1e-9 >= 2 - 1e-9

    @pytest.mark.parametrize("eta", [0.7, 0.85, 0.95])
    def test_literal_marginal_scope_finding(self, eta):
        # per-side constraints alone admit correlated losses: S = 2 / (2 eta - 1)
        res = max_chsh_at_efficiency(eta, constraint="marginal")
        assert res.s_max == pytest.approx(min(4.0, 2 / (2 * eta - 1)), abs=1e-5)
        assert res.s_max > closed_form(eta) + 1e-3

    @pytest.mark.parametrize("constraint", ["independent", "marginal"])
    def test_inequality_variant_dominates(self, constraint):
        eq = max_chsh_at_efficiency(0.9, constraint=constraint)
        ineq = max_chsh_at_efficiency(0.9, constraint=constraint, inequality=True)
        assert ineq.s_max >= eq.s_max - 1e-6
        assert not ineq.flagged

    def test_weights_meet_constraints(self):
        res = max_chsh_at_efficiency(0.8)
        w = res.argmax
        assert w.min() >= -1e-9 and w.sum() == pytest.approx(1.0)
        a_det = np.array([sum(w[s.index] for s in STRATEGIES if s.alice_map[x] != 0) for x in (0, 1)])
        b_det = np.array([sum(w[s.index] for s in STRATEGIES if s.bob_map[y] != 0) for y in (0, 1)])
        assert np.allclose(a_det, 0.8, atol=1e-6) and np.allclose(b_det, 0.8, atol=1e-6)

    def test_fallback_deterministic(self):
        a = solve_fallback(0.85, seed=3)
        b = solve_fallback(0.85, seed=3)
        assert a[0] == b[0]
        assert np.allclose(a[1], b[1], atol=1e-9)

    def test_methods(self):
        lp = max_chsh_at_efficiency(0.9, method="lp")
        fb = max_chsh_at_efficiency(0.9, method="fallback")
        assert lp.s_fallback is None and fb.s_lp is None
        assert lp.s_max == pytest.approx(fb.s_max, abs=1e-4)
        with pytest.raises(ValueError):
            max_chsh_at_efficiency(0.9, method="magic")

    @pytest.mark.parametrize("eta", [0.0, -0.1, 1.2])
    def test_infeasible_eta(self, eta):
        with pytest.raises(InfeasibleEfficiencyError):
            max_chsh_at_efficiency(eta)

    def test_lp_value_matches_weights(self):
        s, w = solve_lp(0.75)
        assert conditional_chsh(list(w)) == pytest.approx(s, abs=1e-7)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.5, 1.0))
    def test_closed_form_curve(self, eta):
        assert max_chsh_at_efficiency(eta, method="lp").s_max == pytest.approx(closed_form(eta), abs=1e-6)


class TestCriticalEfficiency:
    def test_quantum_target(self):
        eta = critical_efficiency(QUANTUM_S)
        assert eta == pytest.approx(0.8284, abs=0.01)
        assert eta == pytest.approx(2 / (1 + math.sqrt(2)), abs=2e-4)

    def test_bell_bound_target(self):
        assert critical_efficiency(2.0) == 1.0

    def test_algebraic_target(self):
        assert critical_efficiency(4.0) == pytest.approx(2 / 3, abs=0.01)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            critical_efficiency(4.5)

    def test_non_bracketing(self, monkeypatch):
        # a stand-in optimum that never leaves the Bell bound cannot bracket S = 3
        flat = type("Flat", (), {"s_max": 2.0})()
        monkeypatch.setattr(lhvopt, "max_chsh_at_efficiency", lambda eta, **kw: flat)
        with pytest.raises(BellLabError, match="not bracketed"):
            lhvopt.critical_efficiency(3.0)

    def test_marginal_scope_threshold(self):
        eta = critical_efficiency(QUANTUM_S, constraint="marginal", method="lp")
        assert eta == pytest.approx((1 + 1 / math.sqrt(2)) / 2, abs=2e-4)


class TestRealizeAdversary:
    def run(self, stations, weights, n, seed):
        run = run_experiment(realize_adversary(weights), *stations, n, seed)
        return chsh(pair_coincidences(run.alice, run.bob, 250))

    def test_all_plus(self, stations):
        res = self.run(stations, np.asarray(point_mass(ALL_PLUS_INDEX), dtype=float), 5000, 40)
        assert res.s == 2.0

    def test_argmax_at_threshold(self, stations):
        w = max_chsh_at_efficiency(0.8284).argmax
        res = self.run(stations, w, 4 * 10**5, 41)
        assert res.s == pytest.approx(2.828, abs=0.02)
        assert abs(res.s - conditional_chsh(w)) < 3 * res.stderr_s

    def test_quantum_wins_above_threshold(self, stations):
        w = max_chsh_at_efficiency(0.9).argmax
        res = self.run(stations, w, 4 * 10**5, 42)
        assert res.s < QUANTUM_S - 5 * res.stderr_s
        assert res.s == pytest.approx(4 / 0.9 - 2, abs=4 * res.stderr_s)
