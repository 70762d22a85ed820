"""Online learning loop, baseline policies and the per-step ledger.

Every round draws a fresh instance, lets the policy perform tests until it
reaches a decision, reveals the correct decision and updates the Beta
posterior on the correct-decision column.  Costs are always charged against
the correct decision: the played super arm is only known in hindsight, as
``{(i, y*) : i performed}``.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .belief import BeliefState, map_estimate, sample_theta, ucb_lcb, update_posterior
from .env import Instance, ProblemSpec, realized_cost, sample_instance
from .hypothesis import UNKNOWN, EpisodeState, HypothesisSpace, InconsistentObservation, enumerate_likely, remaining_regions
from .oracle import W_EC2, W_IG, CostModel, OracleConfig, SuperArm, canonical_algorithm, run_oracle

TS = "TS"
BUCB = "BayesUCB"
GREEDY = "Greedy-MAP"
RANDOM = "Random"
ALL = "All"
KINDS = (TS, BUCB, GREEDY, RANDOM, ALL)

_KIND_SUFFIX = {TS: "TS", BUCB: "BUCB", GREEDY: "Greedy"}
_SUFFIX_KIND = {"TS": TS, "BUCB": BUCB, "BAYESUCB": BUCB, "GREEDY": GREEDY, "GREEDY-MAP": GREEDY}

UTILITY_CORRECT = 2
UTILITY_WRONG = -1
UTILITY_UNKNOWN = 0

LEDGER_COLUMNS = (
    "t", "policy", "seed", "n_tests", "realized_cost", "expected_cost_true", "regret_step",
    "cumulative_regret", "utility", "decision_made", "correct_decision", "flag",
)

_INSTANCE_STREAM = 0
_POLICY_STREAM = 1


@dataclass(frozen=True)
class Policy:
    kind: str
    oracle_algorithm: str = W_EC2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        object.__setattr__(self, "oracle_algorithm", canonical_algorithm(self.oracle_algorithm))

    @property
    def uses_oracle(self) -> bool:
        return self.kind in (TS, BUCB, GREEDY)

    @property
    def label(self) -> str:
        if not self.uses_oracle:
            return self.kind
        return f"{self.oracle_algorithm}-{_KIND_SUFFIX[self.kind]}"

    @classmethod
    def parse(cls, label: str) -> "Policy":
        """Parse labels such as ``W-EC2-TS``, ``W-IG-BUCB``, ``W-EC2-Greedy``, ``Random`` or ``All``."""
        text = label.strip()
        for kind in (RANDOM, ALL):
            if text.lower() == kind.lower():
                return cls(kind)
        head, _, tail = text.replace("²", "2").rpartition("-")
        if tail.upper() == "MAP" and head.upper().endswith("-GREEDY"):
            head, tail = head[: -len("-GREEDY")], "GREEDY"
        kind = _SUFFIX_KIND.get(tail.upper())
        if kind is None or not head:
            raise ValueError(f"unknown policy {label!r}; valid names: {', '.join(valid_policy_names())}")
        try:
            return cls(kind, head)
        except ValueError:
            raise ValueError(f"unknown policy {label!r}; valid names: {', '.join(valid_policy_names())}") from None


def valid_policy_names() -> list[str]:
    names = [Policy(k, a).label for a in (W_EC2, W_IG) for k in (TS, BUCB, GREEDY)]
    return names + [RANDOM, ALL]


@dataclass
class StepRecord:
    t: int
    superarm: SuperArm
    realized_cost: float
    expected_cost_true: float
    regret_step: float
    decision_made: int
    correct_decision: int
    utility: int
    flag: str | None = None


@dataclass
class RunLedger:
    policy: str
    seed: int
    config_digest: str = ""
    records: list[StepRecord] = field(default_factory=list)
    failed: bool = False
    error: str | None = None

    def __len__(self):
        return len(self.records)

    def costs(self) -> np.ndarray:
        return np.array([r.realized_cost for r in self.records])

    def expected_costs(self) -> np.ndarray:
        return np.array([r.expected_cost_true for r in self.records])

    def regrets(self) -> np.ndarray:
        return np.array([r.regret_step for r in self.records])

    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.regrets())

    def utilities(self) -> np.ndarray:
        return np.array([r.utility for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(LEDGER_COLUMNS) + "\n")
        cum = 0.0
        for r in self.records:
            cum += r.regret_step
            row = (
                str(r.t), self.policy, str(self.seed), str(len(r.superarm.tests)),
                f"{r.realized_cost:.17g}", f"{r.expected_cost_true:.17g}", f"{r.regret_step:.17g}",
                f"{cum:.17g}", str(r.utility), str(r.decision_made), str(r.correct_decision), r.flag or "",
            )
            buf.write(",".join(row) + "\n")
        if self.failed:
            buf.write(f"# FAILED after {len(self.records)} steps: {self.error}\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------


def expected_cost_under(params: np.ndarray, superarm: SuperArm, costs: CostModel) -> float:
    """Sum of ``mu1 * theta + mu0 * (1 - theta)`` over the arm's base arms."""
    if not superarm.tests:
        return 0.0
    params = np.asarray(params, dtype=float)
    tests = np.asarray(superarm.tests)
    j = superarm.decision
    return float((costs.cost1[tests, j] * params[tests, j] + costs.cost0[tests, j] * (1.0 - params[tests, j])).sum())


def utility_of(decision_made: int, correct: int, unknown_flag: bool = False) -> int:
    if unknown_flag or decision_made == UNKNOWN:
        return UTILITY_UNKNOWN
    return UTILITY_CORRECT if decision_made == correct else UTILITY_WRONG


def reference_arm(spec: ProblemSpec, oracle_cfg: OracleConfig, instance: Instance, space: HypothesisSpace) -> SuperArm:
    """Arm the same oracle plays with the true parameters, charged to the correct decision."""
    arm = run_oracle(oracle_cfg, space, instance.probe, spec.costs, spec.theta_star, spec.decision_prior)
    return arm.with_decision(instance.correct_decision)


def regret_step(
    spec: ProblemSpec,
    oracle_cfg: OracleConfig,
    instance: Instance,
    played: SuperArm,
    space: HypothesisSpace,
    reference: SuperArm | None = None,
) -> float:
    """Expected-cost gap (under ``theta*``) between the played arm and the reference arm."""
    if reference is None:
        reference = reference_arm(spec, oracle_cfg, instance, space)
    hindsight = played.with_decision(instance.correct_decision)
    return expected_cost_under(spec.theta_star, hindsight, spec.costs) - expected_cost_under(
        spec.theta_star, reference, spec.costs
    )


def _play_random(space: HypothesisSpace, instance: Instance, rng: np.random.Generator) -> SuperArm:
    """Perform uniformly random unperformed tests until one region survives."""
    state = EpisodeState.start(space)
    arm = SuperArm(decision=UNKNOWN)
    while True:
        alive = remaining_regions(space, state)
        if len(alive) == 1:
            arm.decision = alive.pop()
            return arm
        unperformed = [i for i in range(space.n) if i not in state.observed]
        if not unperformed:
            return arm
        i = unperformed[int(rng.integers(len(unperformed)))]
        q = instance.probe(i)
        arm.tests.append(i)
        arm.outcomes[i] = q
        try:
            state.observe(i, q)
        except InconsistentObservation:
            arm.decision = int(np.argmax(state.region_posterior))
            arm.flag = "outside-space"
            return arm


def _play_all(space: HypothesisSpace, instance: Instance) -> SuperArm:
    state = EpisodeState.start(space)
    arm = SuperArm(decision=UNKNOWN)
    fallback = None
    for i in range(space.n):
        q = instance.probe(i)
        arm.tests.append(i)
        arm.outcomes[i] = q
        if fallback is None:
            try:
                state.observe(i, q)
            except InconsistentObservation:
                fallback = int(np.argmax(state.region_posterior))
    if fallback is not None:
        arm.decision = fallback
        arm.flag = "outside-space"
    else:
        alive = remaining_regions(space, state)
        arm.decision = alive.pop() if len(alive) == 1 else UNKNOWN
    return arm


def _finish(
    t: int,
    played: SuperArm,
    belief: BeliefState,
    spec: ProblemSpec,
    instance: Instance,
    reference: SuperArm,
) -> tuple[StepRecord, BeliefState]:
    y = instance.correct_decision
    hindsight = played.with_decision(y)
    expected = expected_cost_under(spec.theta_star, hindsight, spec.costs)
    ref_cost = expected_cost_under(spec.theta_star, reference, spec.costs)
    record = StepRecord(
        t=t,
        superarm=hindsight,
        realized_cost=realized_cost(hindsight, spec.costs),
        expected_cost_true=expected,
        regret_step=expected - ref_cost,
        decision_made=played.decision,
        correct_decision=y,
        utility=utility_of(played.decision, y),
        flag=played.flag,
    )
    return record, update_posterior(belief, played.tests, played.outcomes, y)


def _play(
    policy: Policy,
    belief: BeliefState,
    spec: ProblemSpec,
    space: HypothesisSpace,
    oracle_cfg: OracleConfig,
    instance: Instance,
    t: int,
    rng: np.random.Generator,
) -> SuperArm:
    if policy.kind == RANDOM:
        return _play_random(space, instance, rng)
    if policy.kind == ALL:
        return _play_all(space, instance)
    cfg = oracle_cfg if oracle_cfg.algorithm == policy.oracle_algorithm else OracleConfig(
        policy.oracle_algorithm, oracle_cfg.epsilon_cost, oracle_cfg.max_tests, oracle_cfg.progress_tol
    )
    if policy.kind == TS:
        params = sample_theta(belief, rng)
    elif policy.kind == BUCB:
        params = ucb_lcb(belief, t)
    else:
        params = map_estimate(belief)
    return run_oracle(cfg, space, instance.probe, spec.costs, params, spec.decision_prior)


def step_ts(belief, spec, space, oracle_cfg, instance, rng, t: int = 1):
    played = _play(Policy(TS, oracle_cfg.algorithm), belief, spec, space, oracle_cfg, instance, t, rng)
    return _finish(t, played, belief, spec, instance, reference_arm(spec, oracle_cfg, instance, space))


def step_bucb(belief, spec, space, oracle_cfg, instance, t: int):
    played = _play(Policy(BUCB, oracle_cfg.algorithm), belief, spec, space, oracle_cfg, instance, t, None)
    return _finish(t, played, belief, spec, instance, reference_arm(spec, oracle_cfg, instance, space))


def step_greedy(belief, spec, space, oracle_cfg, instance, t: int = 1):
    played = _play(Policy(GREEDY, oracle_cfg.algorithm), belief, spec, space, oracle_cfg, instance, t, None)
    return _finish(t, played, belief, spec, instance, reference_arm(spec, oracle_cfg, instance, space))


def step_random(spec, space, instance, rng, oracle_cfg: OracleConfig | None = None, t: int = 1) -> StepRecord:
    oracle_cfg = oracle_cfg or OracleConfig()
    belief = BeliefState(spec.prior_alpha0, spec.prior_beta0)
    return _finish(t, _play_random(space, instance, rng), belief, spec, instance,
                   reference_arm(spec, oracle_cfg, instance, space))[0]


def step_all(spec, space, instance, oracle_cfg: OracleConfig | None = None, t: int = 1) -> StepRecord:
    oracle_cfg = oracle_cfg or OracleConfig()
    belief = BeliefState(spec.prior_alpha0, spec.prior_beta0)
    return _finish(t, _play_all(space, instance), belief, spec, instance,
                   reference_arm(spec, oracle_cfg, instance, space))[0]


# ---------------------------------------------------------------------------


def step_rng(seed: int, stream: int, t: int) -> np.random.Generator:
    """Per-step generator: master seed -> stream (instances / policy) -> step index."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream, t))))


def synthetic_instances(spec: ProblemSpec, seed: int) -> Iterator[Instance]:
    t = 1
    while True:
        yield sample_instance(spec, step_rng(seed, _INSTANCE_STREAM, t))
        t += 1


def build_space(spec: ProblemSpec, K: int = 100, overlap: bool = False) -> HypothesisSpace:
    """Hypothesis space enumerated from the true parameters (vectors and regions only are used)."""
    return enumerate_likely(spec.theta_star, spec.decision_prior, K, overlap=overlap)


def config_digest(*parts) -> str:
    return hashlib.sha256("|".join(str(p) for p in parts).encode()).hexdigest()[:16]


def run_experiment(
    spec: ProblemSpec,
    policy: Policy | str,
    T: int,
    seed: int,
    *,
    space: HypothesisSpace | None = None,
    oracle_cfg: OracleConfig | None = None,
    instances: Iterator[Instance] | None = None,
    K: int = 100,
    overlap: bool = False,
    digest: str = "",
    on_step: Callable[[StepRecord], None] | None = None,
) -> RunLedger:
    """Run ``T`` rounds of one policy; the belief is threaded through all rounds.

    Instances come from ``instances`` when given (e.g. a dataset stream),
    otherwise from the spec using the seed's instance stream, so every policy
    sees the same instance sequence for a given seed.  An exception ends the
    run with a ledger marked ``failed`` that keeps the completed rounds.
    """
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    if T < 0:
        raise ValueError("T must be non-negative")
    space = space if space is not None else build_space(spec, K, overlap)
    oracle_cfg = oracle_cfg or OracleConfig(policy.oracle_algorithm)
    ref_cfg = OracleConfig(policy.oracle_algorithm, oracle_cfg.epsilon_cost, oracle_cfg.max_tests, oracle_cfg.progress_tol)
    stream = instances if instances is not None else synthetic_instances(spec, seed)
    ledger = RunLedger(policy.label, seed, digest)
    belief = BeliefState(spec.prior_alpha0, spec.prior_beta0)
    reference_cache: dict[int, SuperArm] = {}
    try:
        for t in range(1, T + 1):
            instance = next(stream)
            rng = step_rng(seed, _POLICY_STREAM, t)
            played = _play(policy, belief, spec, space, ref_cfg, instance, t, rng)
            ref = reference_cache.get(instance.code)
            if ref is None:
                # the reference oracle is deterministic in the outcome vector
                ref = run_oracle(ref_cfg, space, instance.probe, spec.costs, spec.theta_star, spec.decision_prior)
                reference_cache[instance.code] = ref
            record, belief = _finish(t, played, belief, spec, instance, ref.with_decision(instance.correct_decision))
            ledger.records.append(record)
            if on_step is not None:
                on_step(record)
    except Exception as exc:  # keep partial ledger
        ledger.failed = True
        ledger.error = f"{type(exc).__name__}: {exc}"
    return ledger
