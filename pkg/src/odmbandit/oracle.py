"""Interactive cost-weighted test-selection oracles (W-IG and W-EC2).

Both oracles work on the hypothesis posterior of an :class:`EpisodeState`.
For a candidate test ``i`` everything they need is contained in the mass of
each decision region split by the outcome of ``i``; the gain kernels below
take those per-outcome region masses for all candidate tests at once.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import xlogy

from .belief import ParamInterval
from .hypothesis import (
    UNKNOWN,
    EpisodeState,
    HypothesisSpace,
    InconsistentObservation,
    remaining_regions,
)

W_IG = "W-IG"
W_EC2 = "W-EC2"
ALGORITHMS = (W_IG, W_EC2)

EPSILON_COST = 1e-12
PROGRESS_TOL = 1e-15
TIE_RTOL = 1e-12

Params = Union[np.ndarray, ParamInterval]


def canonical_algorithm(name: str) -> str:
    key = name.strip().upper().replace("²", "2").replace("_", "-")
    if key in ("W-IG", "WIG", "IG"):
        return W_IG
    if key in ("W-EC2", "WEC2", "EC2"):
        return W_EC2
    raise ValueError(f"unknown oracle algorithm {name!r}; expected one of {', '.join(ALGORITHMS)}")


@dataclass(frozen=True)
class CostModel:
    """Outcome-dependent test costs: ``cost0[i, j]`` / ``cost1[i, j]`` for outcome 0 / 1 under decision j."""

    cost0: np.ndarray
    cost1: np.ndarray

    def __post_init__(self):
        c0 = np.array(self.cost0, dtype=float)
        c1 = np.array(self.cost1, dtype=float)
        if c0.ndim != 2 or c0.shape != c1.shape:
            raise ValueError("cost matrices must be matching n x m arrays")
        if np.any(c0 < 0) or np.any(c1 < 0):
            raise ValueError("costs must be non-negative")
        c0.setflags(write=False)
        c1.setflags(write=False)
        object.__setattr__(self, "cost0", c0)
        object.__setattr__(self, "cost1", c1)

    @property
    def shape(self):
        return self.cost0.shape

    def in_unit_range(self) -> bool:
        return bool(np.all(self.cost0 <= 1) and np.all(self.cost1 <= 1))

    def scaled(self, c: float) -> "CostModel":
        # scaled copies may leave [0, 1]; only used for invariance checks
        return CostModel(self.cost0 * c, self.cost1 * c)

    def mean_cost(self, theta: np.ndarray) -> np.ndarray:
        """Per-base-arm expected cost ``mu1 * theta + mu0 * (1 - theta)``."""
        return self.cost1 * theta + self.cost0 * (1.0 - theta)

    @classmethod
    def uniform(cls, n: int, m: int, value: float = 1.0) -> "CostModel":
        return cls(np.full((n, m), value), np.full((n, m), value))


@dataclass
class SuperArm:
    """Tests performed in one episode plus the decision reached."""

    decision: int
    tests: list[int] = field(default_factory=list)
    outcomes: dict[int, int] = field(default_factory=dict)
    flag: str | None = None
    trace: list[tuple[int, float, float, int]] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.tests)) != len(self.tests):
            raise ValueError("a super arm cannot repeat a test")

    def with_decision(self, decision: int) -> "SuperArm":
        return SuperArm(decision, list(self.tests), dict(self.outcomes), self.flag, list(self.trace))

    def trace_text(self, sep: str = ",") -> str:
        buf = io.StringIO()
        buf.write(sep.join(("step", "test", "gain", "cost", "outcome")) + "\n")
        for k, (i, g, c, q) in enumerate(self.trace):
            buf.write(sep.join((str(k), str(i), f"{g:.17g}", f"{c:.17g}", str(q))) + "\n")
        return buf.getvalue()


@dataclass(frozen=True)
class OracleConfig:
    algorithm: str = W_EC2
    epsilon_cost: float = EPSILON_COST
    max_tests: int | None = None
    progress_tol: float = PROGRESS_TOL

    def __post_init__(self):
        object.__setattr__(self, "algorithm", canonical_algorithm(self.algorithm))
        if not self.epsilon_cost > 0:
            raise ValueError("epsilon_cost must be positive")
        if self.max_tests is not None and self.max_tests < 0:
            raise ValueError("max_tests must be non-negative")


# ---------------------------------------------------------------------------
# gain kernels


def outcome_masses(state: EpisodeState) -> tuple[np.ndarray, np.ndarray]:
    """Region posterior ``p[j]`` and ``mass1[i, j] = Pr(x_i = 1, y = j | x_P)`` for every test."""
    space = state.space
    weighted = space._region_onehot * state.posterior[:, None]
    mass1 = space.bits.T @ weighted
    region = weighted.sum(axis=0)
    return region, np.minimum(mass1, region[None, :])


def ig_from_masses(region: np.ndarray, mass1: np.ndarray) -> np.ndarray:
    """Expected reduction of decision-region entropy (nats) for each row of ``mass1``."""
    total = region.sum()
    p = region / total
    p1 = np.minimum(mass1 / total, p[None, :])
    p0 = np.clip(p[None, :] - p1, 0.0, None)
    h_prior = -xlogy(p, p).sum()
    # sum_q Pr(q) H(y | q) = sum_q [Pr(q) log Pr(q) - sum_j Pr(q, j) log Pr(q, j)]
    expected = np.zeros(mass1.shape[0])
    for pq in (p0, p1):
        sq = pq.sum(axis=1)
        expected += xlogy(sq, sq) - xlogy(pq, pq).sum(axis=1)
    return np.maximum(h_prior - expected, 0.0)


def ec2_from_masses(region: np.ndarray, mass1: np.ndarray) -> np.ndarray:
    """Expected weight of live cross-region edges cut by each test (pre-observation weights)."""
    mass0 = np.clip(region[None, :] - mass1, 0.0, None)
    total = region.sum()
    live = 0.5 * (total * total - (region * region).sum())
    gain = np.zeros(mass1.shape[0])
    for mq in (mass0, mass1):
        sq = mq.sum(axis=1)
        kept = 0.5 * (sq * sq - (mq * mq).sum(axis=1))
        gain += sq / total * (live - kept)
    return np.maximum(gain, 0.0)


def _numerators(state: EpisodeState, algorithm: str) -> np.ndarray:
    region, mass1 = outcome_masses(state)
    if algorithm == W_IG:
        return ig_from_masses(region, mass1)
    return ec2_from_masses(region, mass1)


def _costs_for(region_post: np.ndarray, theta: np.ndarray, costs: CostModel) -> np.ndarray:
    return costs.mean_cost(theta) @ region_post


def _optimistic_theta(interval: ParamInterval, costs: CostModel) -> np.ndarray:
    # per base arm, the endpoint minimizing mu1*theta + mu0*(1-theta)
    return np.where(costs.cost1 > costs.cost0, interval.lower, interval.upper)


def score_tests(
    states: Sequence[EpisodeState],
    params: Params,
    costs: CostModel,
    algorithm: str,
    epsilon_cost: float = EPSILON_COST,
) -> tuple[np.ndarray, np.ndarray]:
    """Gain numerators and clamped expected costs for every test.

    ``states`` holds one state in point mode and the (upper, lower) pair in
    interval mode.
    """
    if isinstance(params, ParamInterval):
        num = np.maximum(*[_numerators(s, algorithm) for s in states])
        theta = _optimistic_theta(params, costs)
        den = np.minimum(*[_costs_for(s.region_posterior, theta, costs) for s in states])
    else:
        (state,) = states
        num = _numerators(state, algorithm)
        den = _costs_for(state.region_posterior, params, costs)
    return num, np.maximum(den, epsilon_cost)


def argmax_lowest(scores: np.ndarray, candidates: Sequence[int]) -> int:
    """Index of the best candidate; near-ties (relative 1e-12) go to the lowest test index."""
    cand = sorted(candidates)
    vals = scores[cand]
    best = vals.max()
    tol = TIE_RTOL * max(1.0, abs(best))
    for i, v in zip(cand, vals):
        if v >= best - tol:
            return i
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# single-test API


def _check_unperformed(i: int, state: EpisodeState) -> None:
    if i in state.observed:
        raise ValueError(f"test {i} has already been performed")


def expected_test_cost(
    i: int, state: EpisodeState, params: np.ndarray, costs: CostModel, epsilon_cost: float = EPSILON_COST
) -> float:
    """``sum_j sum_q mu_ij^(q) Pr(x_i = q, y = j | x_P)``, clamped below by ``epsilon_cost``."""
    _check_unperformed(i, state)
    p = state.region_posterior
    value = float(costs.mean_cost(np.asarray(params, float))[i] @ p)
    return max(value, epsilon_cost)


def ig_gain(i: int, state: EpisodeState) -> float:
    _check_unperformed(i, state)
    region, mass1 = outcome_masses(state)
    return float(ig_from_masses(region, mass1[i : i + 1])[0])


def wig_gain(i: int, state: EpisodeState, params: np.ndarray, costs: CostModel) -> float:
    return ig_gain(i, state) / expected_test_cost(i, state, params, costs)


def ec2_edges(space: HypothesisSpace, state: EpisodeState) -> list[tuple[int, int, float]]:
    """Live edges ``(h, h', w)`` between posterior-positive hypotheses of different regions."""
    alive = np.flatnonzero(state.posterior > 0)
    edges = []
    for a_pos, a in enumerate(alive):
        for b in alive[a_pos + 1 :]:
            if space.regions[a] != space.regions[b]:
                edges.append((int(a), int(b), float(state.posterior[a] * state.posterior[b])))
    return edges


def ec2_gain(i: int, state: EpisodeState) -> float:
    _check_unperformed(i, state)
    region, mass1 = outcome_masses(state)
    return float(ec2_from_masses(region, mass1[i : i + 1])[0])


def wec2_gain(i: int, state: EpisodeState, params: np.ndarray, costs: CostModel) -> float:
    return ec2_gain(i, state) / expected_test_cost(i, state, params, costs)


def interval_states(state: EpisodeState, interval: ParamInterval) -> list[EpisodeState]:
    return [state.under(interval.upper), state.under(interval.lower)]


def interval_gain_eval(
    i: int,
    state: EpisodeState,
    interval: ParamInterval,
    costs: CostModel,
    algorithm: str,
    epsilon_cost: float = EPSILON_COST,
) -> float:
    """Optimistic gain-to-cost ratio of test ``i`` under a parameter interval.

    The numerator is the larger of the gains computed with all parameters at
    the upper and at the lower bound; the expected cost uses, per base arm,
    whichever bound makes it smaller.
    """
    _check_unperformed(i, state)
    algorithm = canonical_algorithm(algorithm)
    num, den = score_tests(interval_states(state, interval), interval, costs, algorithm, epsilon_cost)
    return float(num[i] / den[i])


# ---------------------------------------------------------------------------
# the interactive loop


def _indistinguishable(state: EpisodeState, unperformed: Sequence[int]) -> bool:
    alive = state.posterior > 0
    if not unperformed:
        return True
    rest = state.space.bits[alive][:, list(unperformed)]
    return bool(np.all(rest == rest[0]))


def _fallback_decision(states: Sequence[EpisodeState]) -> int:
    post = np.mean([s.region_posterior for s in states], axis=0)
    return int(np.argmax(post))


def _initial_states(space: HypothesisSpace, params: Params, decision_prior) -> list[EpisodeState]:
    if isinstance(params, ParamInterval):
        return [
            EpisodeState.start(space, params.upper, decision_prior),
            EpisodeState.start(space, params.lower, decision_prior),
        ]
    return [EpisodeState.start(space, params, decision_prior)]


def run_oracle(
    config: OracleConfig,
    space: HypothesisSpace,
    env_probe: Callable[[int], int],
    costs: CostModel,
    params: Params,
    decision_prior=None,
) -> SuperArm:
    """Greedily perform the best gain-per-cost test until one decision region remains.

    ``params`` is a parameter matrix (point mode) or a :class:`ParamInterval`
    (BayesUCB mode).  Returns the performed tests with their outcomes and the
    decision: the surviving region, :data:`UNKNOWN` when the survivors span
    several regions but no remaining test can separate them, or the
    posterior argmax (with ``flag`` set) when a guard stops the episode early.
    """
    states = _initial_states(space, params, decision_prior)
    n = space.n
    cap = n if config.max_tests is None else min(n, config.max_tests)
    arm = SuperArm(decision=UNKNOWN)

    while True:
        lead = states[0]
        alive = remaining_regions(space, lead)
        if len(alive) == 1:
            arm.decision = alive.pop()
            return arm
        unperformed = [i for i in range(n) if i not in lead.observed]
        if _indistinguishable(lead, unperformed):
            arm.decision = UNKNOWN
            return arm
        if len(arm.tests) >= cap:
            arm.decision = _fallback_decision(states)
            arm.flag = "max-tests"
            return arm
        num, den = score_tests(states, params, costs, config.algorithm, config.epsilon_cost)
        best = argmax_lowest(num / den, unperformed)
        if num[best] <= config.progress_tol:
            arm.decision = _fallback_decision(states)
            arm.flag = "no-progress"
            return arm
        outcome = int(env_probe(best))
        if outcome not in (0, 1):
            raise ValueError(f"environment returned non-binary outcome {outcome!r} for test {best}")
        arm.tests.append(best)
        arm.outcomes[best] = outcome
        arm.trace.append((best, float(num[best] / den[best]), float(den[best]), outcome))
        try:
            states[0].observe(best, outcome)
        except InconsistentObservation:
            arm.decision = _fallback_decision(states)
            arm.flag = "outside-space"
            return arm
        for s in states[1:]:
            s.observe(best, outcome)
