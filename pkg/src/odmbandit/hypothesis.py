"""Hypothesis spaces, decision regions and the within-episode posterior.

A hypothesis is a full assignment of outcomes to all ``n`` binary tests,
stored as an ``n``-bit integer (bit ``i`` holds test ``i``).  Each hypothesis
belongs to one decision region.  In the default mode an outcome vector occurs
at most once; with ``overlap=True`` the same vector may be listed under
several decisions, which is how unknown decisions arise.
"""

from __future__ import annotations

import heapq
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

#: Decision returned when the surviving hypotheses cannot be told apart but span several regions.
UNKNOWN = -1

MAX_FULL_TESTS = 20
_THETA_FLOOR = 1e-12
_WEIGHT_FLOOR = np.finfo(float).tiny


class HypothesisSpaceTooLarge(ValueError):
    pass


class InconsistentObservation(ValueError):
    """No hypothesis in the space agrees with the observed outcomes."""


@dataclass(frozen=True)
class Hypothesis:
    outcomes: tuple[int, ...]
    region: int
    prior_weight: float

    @property
    def bitstring(self) -> str:
        return "".join(str(x) for x in self.outcomes)


def code_to_bits(code: int, n: int) -> tuple[int, ...]:
    return tuple((code >> i) & 1 for i in range(n))


def bits_to_code(bits: Sequence[int]) -> int:
    return sum(int(b) << i for i, b in enumerate(bits))


def enumerate_full(n: int) -> list[tuple[int, ...]]:
    """All ``2**n`` outcome vectors in lexicographic order (test 0 most significant)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n > MAX_FULL_TESTS:
        raise HypothesisSpaceTooLarge(
            f"full enumeration of {n} tests would create 2**{n} hypotheses (cap is {MAX_FULL_TESTS} tests)"
        )
    out = []
    for k in range(2 ** n):
        out.append(tuple((k >> (n - 1 - i)) & 1 for i in range(n)))
    return out


def _clip_theta(theta: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(theta, dtype=float), _THETA_FLOOR, 1.0 - _THETA_FLOOR)


class HypothesisSpace:
    """Immutable set of hypotheses with region labels and prior weights."""

    def __init__(self, codes, regions, weights, n: int, m: int, *, overlap: bool = False, decision_prior=None):
        codes = np.asarray(codes, dtype=np.int64)
        regions = np.asarray(regions, dtype=np.int64)
        weights = np.asarray(weights, dtype=float)
        if not (codes.shape == regions.shape == weights.shape) or codes.ndim != 1:
            raise ValueError("codes, regions and weights must be equal-length vectors")
        if codes.size == 0:
            raise ValueError("hypothesis space is empty")
        if np.any(regions < 0) or np.any(regions >= m):
            raise ValueError("region labels must lie in [0, m)")
        if np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("prior weights must be non-negative with positive total")
        pairs = set(zip(codes.tolist(), regions.tolist()))
        if len(pairs) != codes.size:
            raise ValueError("duplicate (outcome vector, region) pairs")
        if not overlap and len(set(codes.tolist())) != codes.size:
            raise ValueError("duplicate outcome vectors in a non-overlapping hypothesis space")
        self.n = int(n)
        self.m = int(m)
        self.overlap = overlap
        self.codes = codes
        self.regions = regions
        self.weights = weights / weights.sum()
        if decision_prior is None:
            decision_prior = np.bincount(regions, weights=self.weights, minlength=self.m)
        decision_prior = np.asarray(decision_prior, dtype=float)
        if decision_prior.shape != (self.m,) or np.any(decision_prior < 0) or decision_prior.sum() <= 0:
            raise ValueError("decision prior must be a non-negative vector over the m decisions")
        self.decision_prior = decision_prior / decision_prior.sum()
        self.bits = ((codes[:, None] >> np.arange(self.n)[None, :]) & 1).astype(float)
        self._region_onehot = np.zeros((codes.size, self.m))
        self._region_onehot[np.arange(codes.size), regions] = 1.0
        for arr in (self.codes, self.regions, self.weights, self.bits, self._region_onehot, self.decision_prior):
            arr.setflags(write=False)

    def __len__(self):
        return int(self.codes.size)

    @property
    def hypotheses(self) -> list[Hypothesis]:
        return [
            Hypothesis(code_to_bits(int(c), self.n), int(r), float(w))
            for c, r, w in zip(self.codes, self.regions, self.weights)
        ]

    @property
    def region_index(self) -> dict[int, list[int]]:
        index: dict[int, list[int]] = {}
        for k, r in enumerate(self.regions.tolist()):
            index.setdefault(r, []).append(k)
        return index

    def populated_regions(self) -> set[int]:
        return set(self.regions.tolist())

    def likelihood_weights(self, theta: np.ndarray, decision_prior=None) -> np.ndarray:
        """Normalized ``P(region) * P(outcomes | region)`` under a parameter matrix.

        Weights are floored at the smallest normal double so that a hypothesis
        is only ever eliminated by an inconsistent observation, never by
        underflow.
        """
        if decision_prior is None:
            decision_prior = self.decision_prior
        theta = _clip_theta(theta)
        if theta.shape != (self.n, self.m):
            raise ValueError(f"theta must be {self.n} x {self.m}, got {theta.shape}")
        log1 = np.log(theta)[:, self.regions]  # n x H
        log0 = np.log1p(-theta)[:, self.regions]
        loglik = (self.bits.T * log1 + (1.0 - self.bits.T) * log0).sum(axis=0)
        with np.errstate(divide="ignore"):
            loglik = loglik + np.log(np.asarray(decision_prior, dtype=float))[self.regions]
        if not np.any(np.isfinite(loglik)):
            raise ValueError("every hypothesis has zero prior weight")
        w = np.exp(loglik - loglik.max())
        w /= w.sum()
        return np.where(np.isfinite(loglik), np.maximum(w, _WEIGHT_FLOOR), 0.0)

    def reweighted(self, theta: np.ndarray, decision_prior=None) -> "HypothesisSpace":
        if decision_prior is None:
            decision_prior = self.decision_prior
        return HypothesisSpace(
            self.codes, self.regions, self.likelihood_weights(theta, decision_prior),
            self.n, self.m, overlap=self.overlap, decision_prior=decision_prior,
        )

    def to_table(self) -> str:
        """Plain-text table, one ``bitstring<TAB>region<TAB>weight`` row per hypothesis."""
        buf = io.StringIO()
        prior = ",".join(f"{p:.17g}" for p in self.decision_prior)
        buf.write(f"# n={self.n} m={self.m} overlap={int(self.overlap)} prior={prior}\n")
        buf.write("bitstring\tregion\tweight\n")
        for h in self.hypotheses:
            buf.write(f"{h.bitstring}\t{h.region}\t{h.prior_weight:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_table(cls, text: str) -> "HypothesisSpace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        meta = dict(tok.split("=") for tok in lines[0].lstrip("# ").split())
        codes, regions, weights = [], [], []
        for ln in lines[2:]:
            bitstring, region, weight = ln.split("\t")
            codes.append(bits_to_code([int(ch) for ch in bitstring]))
            regions.append(int(region))
            weights.append(float(weight))
        prior = [float(p) for p in meta["prior"].split(",")] if "prior" in meta else None
        return cls(codes, regions, weights, int(meta["n"]), int(meta["m"]),
                   overlap=bool(int(meta["overlap"])), decision_prior=prior)


def _top_k_vectors(theta_col: np.ndarray, k: int) -> list[tuple[float, int]]:
    """The ``k`` most likely outcome vectors under independent Bernoulli tests.

    Best-first search over sets of bit flips away from the mode vector.  Flip
    costs are sorted so every set is generated exactly once, in non-decreasing
    order of log-likelihood loss.  Returns ``(loglik, code)`` pairs.
    """
    n = theta_col.size
    mode = (theta_col >= 0.5).astype(int)
    log1 = np.log(theta_col)
    log0 = np.log1p(-theta_col)
    best = float(np.where(mode == 1, log1, log0).sum())
    penalty = np.abs(log1 - log0)
    order = np.argsort(penalty, kind="stable")
    sorted_pen = penalty[order]
    mode_code = bits_to_code(mode)

    results = [(best, mode_code)]
    if n == 0:
        return results[:k]
    # heap entries: (loss, tiebreak code, last sorted position, code)
    first = mode_code ^ (1 << int(order[0]))
    heap = [(float(sorted_pen[0]), first, 0, first)]
    while heap and len(results) < k:
        loss, _, last, code = heapq.heappop(heap)
        results.append((best - loss, code))
        if last + 1 < n:
            nxt = 1 << int(order[last + 1])
            extended = code ^ nxt
            heapq.heappush(heap, (loss + float(sorted_pen[last + 1]), extended, last + 1, extended))
            swapped = code ^ (1 << int(order[last])) ^ nxt
            heapq.heappush(
                heap, (loss - float(sorted_pen[last]) + float(sorted_pen[last + 1]), swapped, last + 1, swapped)
            )
    return results


def _loglik_all_decisions(code: int, log1: np.ndarray, log0: np.ndarray) -> np.ndarray:
    n = log1.shape[0]
    bits = np.array(code_to_bits(code, n), dtype=float)[:, None]
    return (bits * log1 + (1.0 - bits) * log0).sum(axis=0)


def enumerate_likely(
    theta: np.ndarray,
    decision_prior: Sequence[float],
    K: int = 100,
    *,
    overlap: bool = False,
) -> HypothesisSpace:
    """Most likely outcome vectors for each decision.

    With ``overlap=False`` a vector found under several decisions is kept
    once and assigned to the decision maximizing ``P(y) P(x | y)`` (lowest
    index on ties).  With ``overlap=True`` every (vector, decision) pair is
    kept as its own hypothesis.
    """
    theta = _clip_theta(theta)
    prior = np.asarray(decision_prior, dtype=float)
    n, m = theta.shape
    if K < 1:
        raise ValueError("K must be at least 1")
    if prior.shape != (m,):
        raise ValueError(f"decision prior must have {m} entries")
    log1 = np.log(theta)
    log0 = np.log1p(-theta)
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior)

    found: dict[tuple[int, int], float] = {}
    for j in range(m):
        if prior[j] <= 0:
            continue
        for loglik, code in _top_k_vectors(theta[:, j], K):
            found[(code, j)] = loglik

    codes, regions, logw = [], [], []
    if overlap:
        for (code, j), loglik in sorted(found.items()):
            codes.append(code)
            regions.append(j)
            logw.append(log_prior[j] + loglik)
    else:
        for code in sorted({c for c, _ in found}):
            joint = log_prior + _loglik_all_decisions(code, log1, log0)
            j = int(np.argmax(joint))  # first maximum -> lowest index on ties
            codes.append(code)
            regions.append(j)
            logw.append(float(joint[j]))
    logw = np.asarray(logw)
    w = np.exp(logw - logw.max())
    return HypothesisSpace(codes, regions, w, n, m, overlap=overlap, decision_prior=prior)


def full_space(theta: np.ndarray, decision_prior: Sequence[float]) -> HypothesisSpace:
    """All ``2**n`` vectors, each assigned to its most likely decision."""
    n = np.asarray(theta).shape[0]
    if n > MAX_FULL_TESTS:
        raise HypothesisSpaceTooLarge(f"full enumeration of {n} tests exceeds the cap of {MAX_FULL_TESTS}")
    return enumerate_likely(theta, decision_prior, K=2 ** n)


@dataclass
class EpisodeState:
    """Observations made so far in one episode plus the induced hypothesis posterior.

    ``prior`` holds the hypothesis weights under the parameter vector the
    oracle is acting on; the space itself only fixes vectors and regions.
    """

    space: HypothesisSpace
    prior: np.ndarray
    performed: list[int] = field(default_factory=list)
    observed: dict[int, int] = field(default_factory=dict)
    posterior: np.ndarray | None = None

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=float)
        if self.posterior is None:
            self.posterior = self.prior / self.prior.sum()

    @classmethod
    def start(cls, space: HypothesisSpace, theta=None, decision_prior=None) -> "EpisodeState":
        if theta is None:
            return cls(space, space.weights.copy())
        return cls(space, space.likelihood_weights(theta, decision_prior))

    def under(self, theta, decision_prior=None) -> "EpisodeState":
        """Same observations, hypothesis weights recomputed for another parameter matrix."""
        fresh = EpisodeState(self.space, self.space.likelihood_weights(theta, decision_prior),
                             list(self.performed), dict(self.observed))
        return hypothesis_posterior(self.space, fresh)

    def copy(self) -> "EpisodeState":
        return EpisodeState(self.space, self.prior, list(self.performed), dict(self.observed), self.posterior.copy())

    def observe(self, test: int, outcome: int) -> None:
        """Record one outcome and refresh the posterior in place.

        On :class:`InconsistentObservation` the state is left unchanged.
        """
        if test in self.observed:
            raise ValueError(f"test {test} already performed")
        if outcome not in (0, 1):
            raise ValueError(f"outcome must be 0 or 1, got {outcome!r}")
        keep = self.space.bits[:, test] == outcome
        post = np.where(keep, self.posterior, 0.0)
        total = post.sum()
        if total <= 0.0:
            raise InconsistentObservation(f"observing x_{test}={outcome} leaves no consistent hypothesis")
        self.performed.append(test)
        self.observed[test] = outcome
        self.posterior = post / total

    @property
    def region_posterior(self) -> np.ndarray:
        return np.bincount(self.space.regions, weights=self.posterior, minlength=self.space.m)


def consistent_mask(space: HypothesisSpace, observed: dict[int, int]) -> np.ndarray:
    if not observed:
        return np.ones(len(space), dtype=bool)
    tests = np.fromiter(observed.keys(), dtype=np.int64)
    values = np.fromiter(observed.values(), dtype=np.int64)
    mask = int((1 << tests).sum())
    target = int((values << tests).sum())
    return (space.codes & mask) == target


def hypothesis_posterior(space: HypothesisSpace, state: EpisodeState) -> EpisodeState:
    """Recompute ``P(h | x_P)`` from the state's prior weights and its observations."""
    for q in state.observed.values():
        if q not in (0, 1):
            raise ValueError(f"outcome must be 0 or 1, got {q!r}")
    post = np.where(consistent_mask(space, state.observed), state.prior, 0.0)
    total = post.sum()
    if total <= 0.0:
        raise InconsistentObservation("observation outside hypothesis space")
    return EpisodeState(space, state.prior, list(state.performed), dict(state.observed), post / total)


def remaining_regions(space: HypothesisSpace, state: EpisodeState) -> set[int]:
    return set(space.regions[state.posterior > 0].tolist())


def decision_region_posterior(space: HypothesisSpace, state: EpisodeState) -> np.ndarray:
    return np.bincount(space.regions, weights=state.posterior, minlength=space.m)


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats, ignoring zero entries."""
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum()) if p.size else 0.0


def log_likelihood(code: int, theta_col: np.ndarray) -> float:
    bits = code_to_bits(code, theta_col.size)
    return sum(math.log(t) if b else math.log1p(-t) for b, t in zip(bits, theta_col))
