import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import brute_force as bf
from odmbandit.belief import ParamInterval
from odmbandit.hypothesis import UNKNOWN, EpisodeState, HypothesisSpace, bits_to_code, enumerate_likely
from odmbandit.oracle import (
    W_EC2,
    W_IG,
    CostModel,
    OracleConfig,
    SuperArm,
    argmax_lowest,
    canonical_algorithm,
    ec2_edges,
    ec2_gain,
    expected_test_cost,
    ig_gain,
    interval_gain_eval,
    interval_states,
    run_oracle,
    score_tests,
    wec2_gain,
    wig_gain,
)


def random_problem(seed, n=3, m=2):
    rng = np.random.default_rng(seed)
    theta = rng.beta(2, 2, (n, m))
    prior = rng.dirichlet(np.ones(m))
    sp = bf.ml_space(theta.tolist(), prior.tolist())
    space = HypothesisSpace([bits_to_code(x) for x, _ in sp], [r for _, r in sp], np.ones(len(sp)), n, m,
                            decision_prior=prior)
    costs = CostModel(rng.uniform(size=(n, m)), rng.uniform(size=(n, m)))
    return rng, theta, prior, sp, space, costs


def matched_state(sp, space, theta, prior, observed):
    state = EpisodeState.start(space, theta, prior)
    for i, q in observed.items():
        state.observe(i, q)
    ref_post = bf.posterior(sp, bf.weights(sp, theta.tolist(), prior.tolist()), observed)
    order = [list(space.codes).index(bits_to_code(x)) for x, _ in sp]
    assert state.posterior[order] == pytest.approx(ref_post, abs=1e-14)
    return state, ref_post


def two_region_space():
    # test 0 separates the regions, test 1 is noise
    theta = np.array([[0.99, 0.01], [0.6, 0.6]])
    sp = bf.ml_space(theta.tolist(), [0.5, 0.5])
    space = HypothesisSpace([bits_to_code(x) for x, _ in sp], [r for _, r in sp], np.ones(4), 2, 2,
                            decision_prior=[0.5, 0.5])
    return theta, space


class TestCost:
    def test_constant_costs(self, rng):
        space = enumerate_likely(rng.beta(2, 2, (3, 2)), [0.5, 0.5], K=8)
        state = EpisodeState.start(space, rng.beta(2, 2, (3, 2)))
        costs = CostModel.uniform(3, 2, 0.37)
        for i in range(3):
            assert expected_test_cost(i, state, rng.beta(2, 2, (3, 2)), costs) == pytest.approx(0.37, abs=1e-15)

    def test_deterministic_outcome(self):
        space = HypothesisSpace([0, 1, 2], [1, 1, 1], [1, 1, 1], 2, 2)
        theta = np.array([[1.0, 1.0], [0.3, 0.3]])
        costs = CostModel(np.full((2, 2), 0.2), np.array([[0.9, 0.8], [0.5, 0.5]]))
        assert expected_test_cost(0, EpisodeState.start(space), theta, costs) == pytest.approx(0.8)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        rng, theta, prior, sp, space, costs = random_problem(seed)
        state, post = matched_state(sp, space, theta, prior, {1: 0})
        for i in (0, 2):
            ref = bf.cost(sp, post, 2, i, theta.tolist(), costs.cost0.tolist(), costs.cost1.tolist())
            assert expected_test_cost(i, state, theta, costs) == pytest.approx(ref, rel=1e-13)

    def test_clamp_and_performed(self):
        space = HypothesisSpace([0, 1], [0, 1], [1, 1], 1, 2)
        state = EpisodeState.start(space)
        assert expected_test_cost(0, state, np.full((1, 2), 0.5), CostModel.uniform(1, 2, 0.0)) == 1e-12
        state.observe(0, 1)
        with pytest.raises(ValueError):
            expected_test_cost(0, state, np.full((1, 2), 0.5), CostModel.uniform(1, 2))


class TestIG:
    def test_uninformative(self):
        space = HypothesisSpace([0b01, 0b11, 0b10], [0, 0, 1], [1, 1, 1], 2, 2)
        state = EpisodeState.start(space)
        state.observe(0, 1)
        assert ig_gain(1, state) == 0.0

    def test_one_bit(self):
        theta, space = two_region_space()
        state = EpisodeState.start(space, theta)
        assert ig_gain(0, state) == pytest.approx(math.log(2), abs=1e-12)
        assert ig_gain(1, state) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(6))
    def test_brute_force(self, seed):
        rng, theta, prior, sp, space, costs = random_problem(seed, n=3, m=3)
        for observed in ({}, {0: 1}):
            state, post = matched_state(sp, space, theta, prior, observed)
            for i in range(3):
                if i in observed:
                    continue
                assert ig_gain(i, state) == pytest.approx(bf.ig(sp, post, 3, i), abs=1e-13)
                ref_cost = bf.cost(sp, post, 3, i, theta.tolist(), costs.cost0.tolist(), costs.cost1.tolist())
                assert wig_gain(i, state, theta, costs) == pytest.approx(bf.ig(sp, post, 3, i) / ref_cost, abs=1e-12)

    def test_unit_costs_and_halving(self, rng):
        _, theta, prior, _, space, costs = random_problem(9)
        state = EpisodeState.start(space, theta, prior)
        unit = CostModel.uniform(3, 2)
        half = costs.scaled(0.5)
        for i in range(3):
            assert wig_gain(i, state, theta, unit) == pytest.approx(ig_gain(i, state), rel=1e-14)
            assert wig_gain(i, state, theta, half) == pytest.approx(2 * wig_gain(i, state, theta, costs), rel=1e-14)


class TestEC2:
    def test_edges_single_region(self):
        space = HypothesisSpace([0, 1, 2], [1, 1, 1], [1, 1, 1], 2, 2)
        assert ec2_edges(space, EpisodeState.start(space)) == []

    def test_edge_weight_product(self):
        space = HypothesisSpace([0, 1], [0, 1], [0.6, 0.4], 1, 2)
        state = EpisodeState.start(space)
        ((a, b, w),) = ec2_edges(space, state)
        assert (a, b) == (0, 1) and w == pytest.approx(0.24)
        # both outcomes cut the only edge
        assert ec2_gain(0, state) == pytest.approx(0.24)

    def test_two_by_two(self):
        space = HypothesisSpace([0, 1, 2, 3], [0, 0, 1, 1], [0.1, 0.2, 0.3, 0.4], 2, 2)
        edges = ec2_edges(space, EpisodeState.start(space))
        assert len(edges) == 4
        assert sum(w for *_, w in edges) == pytest.approx(0.3 * 0.7)

    def test_constant_test(self):
        space = HypothesisSpace([0b01, 0b11, 0b10], [0, 1, 1], [1, 1, 1], 2, 2)
        state = EpisodeState.start(space)
        state.observe(0, 1)
        assert ec2_gain(1, state) > 0
        const = HypothesisSpace([0b01, 0b11], [0, 1], [1, 1], 2, 2)
        assert ec2_gain(0, EpisodeState.start(const)) == 0.0

    @pytest.mark.parametrize("seed", range(6))
    def test_brute_force(self, seed):
        rng, theta, prior, sp, space, costs = random_problem(seed, n=3, m=3)
        for observed in ({}, {2: 0}):
            state, post = matched_state(sp, space, theta, prior, observed)
            ref_edges = bf.edges(sp, post)
            assert sum(w for *_, w in ec2_edges(space, state)) == pytest.approx(sum(w for *_, w in ref_edges), abs=1e-14)
            for i in range(3):
                if i in observed:
                    continue
                assert ec2_gain(i, state) == pytest.approx(bf.ec2(sp, post, i), abs=1e-14)
                ref_cost = bf.cost(sp, post, 3, i, theta.tolist(), costs.cost0.tolist(), costs.cost1.tolist())
                assert wec2_gain(i, state, theta, costs) == pytest.approx(bf.ec2(sp, post, i) / ref_cost, rel=1e-12)


class TestRunOracle:
    def test_single_region_no_tests(self):
        space = HypothesisSpace([0, 1, 2], [2, 2, 2], [1, 1, 1], 2, 3)
        arm = run_oracle(OracleConfig(), space, lambda i: 1, CostModel.uniform(2, 3), np.full((2, 3), 0.5))
        assert arm.tests == [] and arm.decision == 2

    @pytest.mark.parametrize("algorithm,gain", [(W_EC2, 0.25 / 0.2), (W_IG, math.log(2) / 0.2)])
    def test_hand_trace(self, algorithm, gain):
        theta, space = two_region_space()
        costs = CostModel(np.array([[0.2, 0.2], [0.5, 0.5]]), np.array([[0.2, 0.2], [0.5, 0.5]]))
        for outcome, decision in ((1, 0), (0, 1)):
            arm = run_oracle(OracleConfig(algorithm), space, lambda i: outcome, costs, theta, [0.5, 0.5])
            assert arm.tests == [0] and arm.decision == decision and arm.flag is None
            ((test, g, c, q),) = arm.trace
            assert (test, q) == (0, outcome)
            assert g == pytest.approx(gain, rel=1e-12) and c == pytest.approx(0.2)

    def test_unknown_when_indistinguishable(self):
        space = HypothesisSpace([0b11, 0b11, 0b00], [0, 1, 0], [1, 1, 1], 2, 2, overlap=True)
        arm = run_oracle(OracleConfig(), space, lambda i: 1, CostModel.uniform(2, 2), np.full((2, 2), 0.5))
        assert arm.decision == UNKNOWN and arm.flag is None and len(arm.tests) == 1

    def test_max_tests_guard(self):
        rng, theta, prior, sp, space, costs = random_problem(1, n=4, m=3)
        arm = run_oracle(OracleConfig(max_tests=1), space, lambda i: 1, costs, theta, prior)
        assert len(arm.tests) <= 1
        if len({r for _, r in sp}) > 1:
            assert arm.flag == "max-tests" and 0 <= arm.decision < 3

    def test_no_progress_guard(self):
        space = HypothesisSpace([0b1, 0b0], [0, 1], [1, 1], 1, 2)
        cfg = OracleConfig(progress_tol=10.0)
        arm = run_oracle(cfg, space, lambda i: 1, CostModel.uniform(1, 2), np.full((1, 2), 0.5))
        assert arm.flag == "no-progress" and arm.tests == []

    def test_bad_probe(self):
        space = HypothesisSpace([0b1, 0b0], [0, 1], [1, 1], 1, 2)
        with pytest.raises(ValueError):
            run_oracle(OracleConfig(), space, lambda i: 3, CostModel.uniform(1, 2), np.full((1, 2), 0.5))

    @pytest.mark.parametrize("seed", range(10))
    def test_full_space_terminates_with_one_region(self, seed):
        rng, theta, prior, sp, space, costs = random_problem(seed, n=4, m=3)
        x = tuple(int(v) for v in rng.integers(0, 2, 4))
        for alg in (W_IG, W_EC2):
            arm = run_oracle(OracleConfig(alg), space, lambda i: x[i], costs, rng.beta(2, 2, (4, 3)), prior)
            assert len(arm.tests) <= 4 and len(set(arm.tests)) == len(arm.tests)
            truth = dict(bf.ml_space(theta.tolist(), prior.tolist()))[x]
            assert arm.decision == truth and arm.flag is None


class TestInterval:
    def test_degenerate_equals_point(self):
        rng, theta, prior, sp, space, costs = random_problem(2, n=3, m=3)
        state = EpisodeState.start(space, theta, prior)
        iv = ParamInterval(theta, theta)
        for i in range(3):
            assert interval_gain_eval(i, state, iv, costs, W_EC2) == pytest.approx(wec2_gain(i, state, theta, costs), rel=1e-14)
            assert interval_gain_eval(i, state, iv, costs, W_IG) == pytest.approx(wig_gain(i, state, theta, costs), rel=1e-14)

    def test_equal_outcome_costs(self):
        rng, theta, prior, sp, space, _ = random_problem(3, n=3, m=2)
        c = rng.uniform(size=(3, 2))
        costs = CostModel(c, c)
        lo, hi = theta * 0.7, np.minimum(theta * 1.3, 1.0)
        state = EpisodeState.start(space)
        states = interval_states(state, ParamInterval(lo, hi))
        num, den = score_tests(states, ParamInterval(lo, hi), costs, W_EC2)
        other = ParamInterval(np.zeros_like(lo), np.ones_like(hi))
        _, den2 = score_tests(interval_states(state, other), other, costs, W_EC2)
        # region posteriors depend on the interval, but for a fixed state the cost of each
        # base arm does not depend on theta
        region = [s.region_posterior for s in states]
        assert np.allclose(den, np.minimum(c @ region[0], c @ region[1]))
        ratio = [interval_gain_eval(i, state, ParamInterval(lo, hi), costs, W_EC2) for i in range(3)]
        assert np.argsort(ratio).tolist() == np.argsort(num / den).tolist()
        assert den2.shape == den.shape

    @pytest.mark.parametrize("seed", range(5))
    def test_widening_lowers_cost_term(self, seed):
        rng, theta, prior, sp, space, costs = random_problem(seed, n=3, m=2)
        state = EpisodeState.start(space)
        narrow = ParamInterval(theta * 0.9, np.minimum(theta * 1.1, 1.0))
        wide = ParamInterval(theta * 0.5, np.minimum(theta * 1.5, 1.0))
        # evaluated on the same pair of region posteriors, the optimistic cost can only drop
        states = interval_states(state, narrow)
        _, den_n = score_tests(states, narrow, costs, W_IG)
        _, den_w = score_tests(states, wide, costs, W_IG)
        assert np.all(den_w <= den_n + 1e-15)


def test_argmax_ties_lowest_index():
    scores = np.array([1.0, 3.0, 3.0 * (1 - 1e-14), 2.0])
    assert argmax_lowest(scores, [3, 2, 1]) == 1
    assert argmax_lowest(scores, [3, 2]) == 2
    assert argmax_lowest(scores, [0]) == 0


def test_config_and_models():
    assert canonical_algorithm("w-ec2") == W_EC2 and canonical_algorithm("IG") == W_IG
    with pytest.raises(ValueError):
        canonical_algorithm("greedy")
    with pytest.raises(ValueError):
        OracleConfig(epsilon_cost=0.0)
    with pytest.raises(ValueError):
        CostModel(np.zeros((2, 2)), np.full((2, 2), -1.0))
    with pytest.raises(ValueError):
        SuperArm(0, [1, 1])
    assert CostModel.uniform(2, 2).in_unit_range() and not CostModel.uniform(2, 2, 2.0).in_unit_range()
    arm = SuperArm(1, [0], {0: 1}, trace=[(0, 0.5, 0.25, 1)])
    assert arm.trace_text().splitlines() == ["step,test,gain,cost,outcome", "0,0,0.5,0.25,1"]


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.1, 0.5, 3.0, 10.0]), st.sampled_from([W_IG, W_EC2]))
def test_cost_scaling_invariance(seed, c, algorithm):
    rng, theta, prior, sp, space, costs = random_problem(seed, n=4, m=3)
    x = tuple(int(v) for v in rng.integers(0, 2, 4))
    params = rng.beta(2, 2, (4, 3))
    base = run_oracle(OracleConfig(algorithm), space, lambda i: x[i], costs, params, prior)
    scaled = run_oracle(OracleConfig(algorithm), space, lambda i: x[i], costs.scaled(c), params, prior)
    assert base.tests == scaled.tests and base.decision == scaled.decision


@given(st.integers(0, 2**31 - 1), st.lists(st.tuples(st.integers(0, 3), st.integers(0, 1)), max_size=3))
def test_gains_nonnegative_and_ec2_zero_iff_constant(seed, obs):
    rng, theta, prior, sp, space, costs = random_problem(seed, n=4, m=3)
    state = EpisodeState.start(space, rng.beta(2, 2, (4, 3)), prior)
    for i, q in obs:
        if i not in state.observed and np.any(state.posterior[space.bits[:, i] == q] > 0):
            state.observe(i, q)
    alive = state.posterior > 0
    multi = len(set(space.regions[alive].tolist())) > 1
    for i in range(4):
        if i in state.observed:
            continue
        assert ig_gain(i, state) >= 0.0
        g = ec2_gain(i, state)
        assert g >= 0.0
        if multi:
            constant = np.unique(space.bits[alive, i]).size == 1
            assert (g == 0.0) == constant
