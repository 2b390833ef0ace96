import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfgrl.mdp import TabularMdp, TabularPolicy, expected_return, policy_evaluation, random_mdp, random_policy
from cfgrl.theorems import (
    Constant,
    ExpClipped,
    IndicatorNonNegAdv,
    TableLookup,
    ZeroMass,
    chebyshev_check,
    kl_objective,
    kl_solution_check,
    product_policy,
    tilt,
    verify_attenuation,
    verify_improvement,
)

seeds = st.integers(0, 2**31 - 1)
FUNCS = [IndicatorNonNegAdv(), ExpClipped(1.0, 20.0), TableLookup([-0.5, 0.0, 0.5], [0.2, 1.0, 3.0], 0.05)]


def instance(seed, **kw):
    rng = np.random.default_rng(seed)
    m = random_mdp(rng, **kw)
    return m, random_policy(rng, m.num_states, m.num_actions)


class TestOptimalityFunctions:
    def test_indicator(self):
        np.testing.assert_array_equal(IndicatorNonNegAdv()(np.array([-1e-12, 0.0, 2.0])), [0.0, 1.0, 1.0])

    def test_exp_clipped_saturates(self):
        f = ExpClipped(1.0, 2.0)
        np.testing.assert_allclose(f(np.array([-5.0, 0.0, 1.0, 50.0])), np.exp([-2.0, 0.0, 1.0, 2.0]))
        assert f.upper_bound == pytest.approx(np.exp(2.0))

    def test_table_is_right_continuous_step(self):
        f = TableLookup([0.0, 1.0], [1.0, 2.0], floor=0.5)
        np.testing.assert_array_equal(f(np.array([-1.0, 0.0, 0.5, 1.0, 3.0])), [0.5, 1.0, 1.0, 2.0, 2.0])

    def test_table_rejects_decreasing_values(self):
        with pytest.raises(ValueError):
            TableLookup([0.0, 1.0], [2.0, 1.0], floor=0.0)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=20))
    def test_monotone(self, xs):
        x = np.sort(np.array(xs))
        for f in FUNCS:
            assert np.all(np.diff(f(x)) >= 0)


class TestTilt:
    def test_zero_weight_is_reference(self):
        m, ref = instance(0)
        vals = policy_evaluation(m, ref)
        pi = product_policy(ref, vals, IndicatorNonNegAdv(), w=0.0)
        np.testing.assert_allclose(pi.probs, ref.probs, atol=1e-15)

    def test_constant_function_is_reference(self):
        m, ref = instance(1)
        pi = product_policy(ref, policy_evaluation(m, ref), Constant(2.5))
        np.testing.assert_allclose(pi.probs, ref.probs, atol=1e-15)

    def test_hand_example(self):
        ref = TabularPolicy(np.array([[0.5, 0.25, 0.25]]))
        out = tilt(ref, np.array([[1.0, 2.0, 0.0]]), 1.0)
        np.testing.assert_allclose(out.probs, [[0.5, 0.5, 0.0]])

    def test_zero_mass_raises(self):
        ref = TabularPolicy(np.array([[0.5, 0.5], [0.5, 0.5]]))
        with pytest.raises(ZeroMass) as exc:
            tilt(ref, np.array([[1.0, 0.0], [0.0, 0.0]]), 1.0)
        assert exc.value.state == 1


class TestImprovement:
    @settings(max_examples=60, deadline=None)
    @given(seeds, st.sampled_from(range(len(FUNCS))))
    def test_product_never_worse(self, seed, k):
        m, ref = instance(seed)
        rep = verify_improvement(m, ref, FUNCS[k])
        assert rep.holds
        assert rep.per_state_margin >= -1e-9
        # independent evaluation of the improved policy by fixed-point iteration
        pi = product_policy(ref, policy_evaluation(m, ref), FUNCS[k])
        v = np.zeros(m.num_states)
        for _ in range(3000):
            v = np.sum(pi.probs * (m.reward + m.discount * m.transition @ v), axis=1)
        assert m.initial_dist @ v == pytest.approx(rep.J_new, abs=1e-9)

    def test_strict_gain_on_bandit_like_problem(self):
        P = np.ones((1, 2, 1))
        m = TabularMdp(P, np.array([[1.0, 0.0]]), 0.5, np.array([1.0]))
        ref = TabularPolicy(np.array([[0.5, 0.5]]))
        rep = verify_improvement(m, ref, IndicatorNonNegAdv())
        assert rep.J_ref == pytest.approx(1.0)
        assert rep.J_new == pytest.approx(2.0)

    def test_requires_full_support(self):
        m, _ = instance(2, min_actions=2)
        ref = TabularPolicy.deterministic(np.zeros(m.num_states, dtype=int), m.num_actions)
        with pytest.raises(ValueError):
            verify_improvement(m, ref, IndicatorNonNegAdv())


class TestAttenuation:
    WEIGHTS = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0]

    @settings(max_examples=40, deadline=None)
    @given(seeds, st.sampled_from(range(len(FUNCS))))
    def test_returns_non_decreasing(self, seed, k):
        m, ref = instance(seed)
        rep = verify_attenuation(m, ref, FUNCS[k], self.WEIGHTS)
        assert rep.monotone
        assert rep.returns[0] == pytest.approx(expected_return(m, ref), abs=1e-12)

    def test_rejects_unsorted_weights(self):
        m, ref = instance(3)
        with pytest.raises(ValueError):
            verify_attenuation(m, ref, ExpClipped(), [1.0, 0.5])


class TestChebyshev:
    def test_hand_example(self):
        rep = chebyshev_check([0.5, 0.5], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0])
        assert rep.lhs == pytest.approx(0.5)
        assert rep.rhs == pytest.approx(0.25)
        assert rep.holds

    def test_equality_for_constant(self):
        rep = chebyshev_check([0.2, 0.8], [0.0, 1.0], [3.0, 3.0], [0.0, 5.0])
        assert rep.lhs == pytest.approx(rep.rhs)

    def test_rejects_non_monotone(self):
        with pytest.raises(ValueError):
            chebyshev_check([0.5, 0.5], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0])

    @settings(max_examples=200)
    @given(seeds)
    def test_random_triples(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 10))
        mu = rng.dirichlet(np.ones(n))
        x = rng.normal(size=n)
        order = np.argsort(x)
        g = np.empty(n)
        h = np.empty(n)
        g[order] = np.cumsum(rng.exponential(size=n))
        h[order] = np.cumsum(rng.exponential(size=n))
        assert chebyshev_check(mu, x, g, h).holds


class TestKlSolution:
    def test_two_action_closed_form(self):
        ref = np.array([0.3, 0.7])
        adv = np.array([1.0, -0.5])
        rep = kl_solution_check(ref, adv, 0.5)
        # logistic form of ref * exp(A / beta)
        p0 = 1.0 / (1.0 + (0.7 / 0.3) * np.exp((-0.5 - 1.0) / 0.5))
        assert rep.product_row[0] == pytest.approx(p0, abs=1e-12)
        assert rep.passed

    @settings(max_examples=25, deadline=None)
    @given(seeds, st.integers(1, 5), st.floats(0.2, 5.0))
    def test_search_agrees(self, seed, n, beta):
        rng = np.random.default_rng(seed)
        ref = rng.dirichlet(np.ones(n))
        adv = rng.normal(size=n)
        rep = kl_solution_check(ref, adv, beta)
        assert rep.passed
        obj = kl_objective(rep.product_row, ref, adv, beta)
        assert obj >= kl_objective(rep.argmax_row, ref, adv, beta) - 1e-9

    def test_rejects_non_positive_beta(self):
        with pytest.raises(ValueError):
            kl_solution_check([0.5, 0.5], [0.0, 1.0], 0.0)
