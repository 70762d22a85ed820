"""Problem instances: synthetic generators, CSV datasets and realized costs."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .hypothesis import EpisodeState
from .oracle import (
    EPSILON_COST,
    W_IG,
    CostModel,
    SuperArm,
    canonical_algorithm,
    ec2_from_masses,
    ig_from_masses,
)


class DatasetError(ValueError):
    pass


class SchemaError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Static description of a problem: sizes, decision prior, hidden parameters, costs, Beta priors."""

    n: int
    m: int
    decision_prior: np.ndarray
    theta_star: np.ndarray
    costs: CostModel
    prior_alpha0: np.ndarray
    prior_beta0: np.ndarray

    def __post_init__(self):
        shape = (self.n, self.m)
        prior = np.array(self.decision_prior, dtype=float)
        if prior.shape != (self.m,) or np.any(prior < 0) or not np.isclose(prior.sum(), 1.0, atol=1e-9):
            raise ValueError("decision_prior must be a probability vector over the m decisions")
        object.__setattr__(self, "decision_prior", prior)
        for name in ("theta_star", "prior_alpha0", "prior_beta0"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} must be {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        if np.any(self.theta_star < 0) or np.any(self.theta_star > 1):
            raise ValueError("theta_star entries must lie in [0, 1]")
        if np.any(self.prior_alpha0 <= 0) or np.any(self.prior_beta0 <= 0):
            raise ValueError("Beta prior hyperparameters must be positive")
        if self.costs.shape != shape:
            raise ValueError(f"cost matrices must be {shape}")

    def __eq__(self, other):
        if not isinstance(other, ProblemSpec):
            return NotImplemented
        return self.to_json() == other.to_json()

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "decision_prior": self.decision_prior.tolist(),
            "theta_star": self.theta_star.ravel().tolist(),
            "cost0": self.costs.cost0.ravel().tolist(),
            "cost1": self.costs.cost1.ravel().tolist(),
            "prior_alpha0": self.prior_alpha0.ravel().tolist(),
            "prior_beta0": self.prior_beta0.ravel().tolist(),
        }

    def to_json(self) -> str:
        # json writes floats with repr(), which round-trips exactly
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSpec":
        n, m = int(d["n"]), int(d["m"])

        def mat(key):
            return np.asarray(d[key], dtype=float).reshape(n, m)

        return cls(
            n=n,
            m=m,
            decision_prior=np.asarray(d["decision_prior"], dtype=float),
            theta_star=mat("theta_star"),
            costs=CostModel(mat("cost0"), mat("cost1")),
            prior_alpha0=mat("prior_alpha0"),
            prior_beta0=mat("prior_beta0"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ProblemSpec":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ProblemSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Instance:
    correct_decision: int
    outcomes: tuple[int, ...]

    def probe(self, i: int) -> int:
        return self.outcomes[i]

    @property
    def code(self) -> int:
        return sum(x << i for i, x in enumerate(self.outcomes))


def _sample_costs(n: int, m: int, rng: np.random.Generator, tie_columns: bool) -> CostModel:
    if tie_columns:
        c0 = np.repeat(rng.uniform(size=(n, 1)), m, axis=1)
        c1 = np.repeat(rng.uniform(size=(n, 1)), m, axis=1)
    else:
        c0 = rng.uniform(size=(n, m))
        c1 = rng.uniform(size=(n, m))
    return CostModel(c0, c1)


def generate_navigation(
    n: int = 5,
    m: int = 20,
    prior: tuple[float, float] = (2.0, 2.0),
    rng: np.random.Generator | int | None = None,
    *,
    decision_prior: Sequence[float] | None = None,
    tie_cost_columns: bool = False,
) -> ProblemSpec:
    """Synthetic problem: ``theta* ~ Beta(a, b)`` and ``Uniform[0, 1]`` costs, drawn iid."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    rng = np.random.default_rng(rng)
    a, b = prior
    theta = rng.beta(a, b, size=(n, m))
    costs = _sample_costs(n, m, rng, tie_cost_columns)
    py = np.full(m, 1.0 / m) if decision_prior is None else np.asarray(decision_prior, dtype=float)
    return ProblemSpec(
        n=n, m=m, decision_prior=py, theta_star=theta, costs=costs,
        prior_alpha0=np.full((n, m), float(a)), prior_beta0=np.full((n, m), float(b)),
    )


def sample_instance(spec: ProblemSpec, rng: np.random.Generator) -> Instance:
    y = int(rng.choice(spec.m, p=spec.decision_prior))
    x = (rng.random(spec.n) < spec.theta_star[:, y]).astype(int)
    return Instance(y, tuple(x.tolist()))


def realized_cost(superarm: SuperArm, costs: CostModel) -> float:
    """Sum of ``mu^(x_i)`` at ``(i, decision)`` over the performed tests."""
    total = 0.0
    for i in superarm.tests:
        q = superarm.outcomes[i]
        total += float(costs.cost1[i, superarm.decision] if q == 1 else costs.cost0[i, superarm.decision])
    return total


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    features: np.ndarray  # rows x n, float
    labels: np.ndarray  # rows, int in [0, m)
    feature_names: list[str]
    label_names: list[str]
    non_binary: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError("features must be rows x n and match the label count")
        if self.features.shape[1] != len(self.feature_names):
            raise DatasetError("feature_names does not match the feature count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.label_names)):
            raise SchemaError("label index out of range")

    @property
    def n(self) -> int:
        return self.features.shape[1]

    @property
    def m(self) -> int:
        return len(self.label_names)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def is_binary(self) -> bool:
        return not self.non_binary

    def rows(self) -> Iterator[tuple[np.ndarray, int]]:
        for x, y in zip(self.features, self.labels):
            yield x, int(y)


def _parse_number(text: str, line: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetError(f"line {line}: column {column!r} is not numeric: {text!r}") from None


def load_dataset(path, label_column: str = "label", labels: Sequence[str] | None = None, delimiter: str = ",") -> Dataset:
    """Read a delimited UTF-8 file with a header row.

    ``labels`` fixes the decision order; when omitted, the sorted distinct
    label values are used.  Columns taking values outside ``{0, 1}`` are
    listed in :attr:`Dataset.non_binary`.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise SchemaError(f"{path}: label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        names = [h for k, h in enumerate(header) if k != li]
        raw_rows, raw_labels = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"line {line}: expected {len(header)} fields, found {len(row)}")
            if any(not c.strip() for c in row):
                raise DatasetError(f"line {line}: missing field")
            raw_labels.append((line, row[li].strip()))
            raw_rows.append([_parse_number(c, line, header[k]) for k, c in enumerate(row) if k != li])

    if labels is None:
        label_names = sorted({lab for _, lab in raw_labels})
    else:
        label_names = [str(x) for x in labels]
    index = {lab: k for k, lab in enumerate(label_names)}
    y = []
    for line, lab in raw_labels:
        if lab not in index:
            raise SchemaError(f"line {line}: unknown label {lab!r}; expected one of {label_names}")
        y.append(index[lab])
    X = np.asarray(raw_rows, dtype=float).reshape(len(raw_rows), len(names))
    non_binary = [k for k in range(X.shape[1]) if not np.all((X[:, k] == 0) | (X[:, k] == 1))]
    return Dataset(X, np.asarray(y, dtype=int), names, label_names, non_binary)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:.17g}"


def save_dataset(dataset: Dataset, path, label_column: str = "label") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(dataset.feature_names) + [label_column])
        for x, y in dataset.rows():
            w.writerow([_fmt(v) for v in x] + [dataset.label_names[y]])


def estimate_theta(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Laplace-smoothed ``Pr(x_i = 1 | y = j)`` and the empirical label frequencies."""
    if not dataset.is_binary:
        raise DatasetError(f"features {dataset.non_binary} are not binary; binarize first")
    X, y = dataset.features, dataset.labels
    theta = np.full((dataset.n, dataset.m), 0.5)
    counts = np.bincount(y, minlength=dataset.m)
    for j in range(dataset.m):
        if counts[j]:
            theta[:, j] = (1.0 + X[y == j].sum(axis=0)) / (2.0 + counts[j])
    prior = counts / counts.sum() if counts.sum() else np.full(dataset.m, 1.0 / dataset.m)
    return theta, prior


def decile_thresholds(values: np.ndarray) -> list[float]:
    """Candidate binarization thresholds: the nine deciles, duplicates removed in order."""
    qs = np.quantile(np.asarray(values, dtype=float), np.linspace(0.1, 0.9, 9))
    out: list[float] = []
    for q in qs.tolist():
        if q not in out:
            out.append(q)
    return out


def binarize_dataset(dataset: Dataset, thresholds: Sequence[float] | None = None) -> Dataset:
    """Replace every non-binary column by ``1[value > threshold]`` (median by default)."""
    X = dataset.features.copy()
    for pos, k in enumerate(dataset.non_binary):
        tau = float(np.median(X[:, k])) if thresholds is None else float(thresholds[pos])
        X[:, k] = (X[:, k] > tau).astype(float)
    return Dataset(X, dataset.labels.copy(), list(dataset.feature_names), list(dataset.label_names), [])


def threshold_theta(values: np.ndarray, labels: np.ndarray, m: int, thresholds: Sequence[float]) -> np.ndarray:
    """Laplace-smoothed ``Pr(value > tau | y = j)``; one row per threshold."""
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels, dtype=int)
    out = np.full((len(thresholds), m), 0.5)
    counts = np.bincount(labels, minlength=m)
    for k, tau in enumerate(thresholds):
        above = values > tau
        for j in range(m):
            if counts[j]:
                out[k, j] = (1.0 + above[labels == j].sum()) / (2.0 + counts[j])
    return out


def binarize_gains(
    i: int,
    thresholds: Sequence[float],
    state: EpisodeState,
    theta_by_threshold: np.ndarray,
    costs: CostModel,
    algorithm: str,
    epsilon_cost: float = EPSILON_COST,
) -> tuple[float, float]:
    """Best binarization threshold for real-valued test ``i`` and its weighted gain.

    Row ``k`` of ``theta_by_threshold`` holds ``Pr(x_i > thresholds[k] | y = j)``.
    The binarized test is scored against the current decision-region
    posterior, with outcome probabilities taken from that row.  The first of
    equally good thresholds wins.
    """
    if len(thresholds) == 0:
        raise ValueError("at least one threshold is required")
    algorithm = canonical_algorithm(algorithm)
    theta_k = np.asarray(theta_by_threshold, dtype=float)
    if theta_k.shape != (len(thresholds), state.space.m):
        raise ValueError("theta_by_threshold must have one row of m probabilities per threshold")
    region = state.region_posterior
    mass1 = theta_k * region[None, :]
    num = ig_from_masses(region, mass1) if algorithm == W_IG else ec2_from_masses(region, mass1)
    mean_cost = costs.cost1[i][None, :] * theta_k + costs.cost0[i][None, :] * (1.0 - theta_k)
    den = np.maximum(mean_cost @ region, epsilon_cost)
    scores = num / den
    best = int(np.argmax(scores))  # first maximum
    return float(thresholds[best]), float(scores[best])


def spec_from_dataset(
    dataset: Dataset,
    rng: np.random.Generator | int | None = None,
    prior: tuple[float, float] = (2.0, 2.0),
    tie_cost_columns: bool = False,
) -> ProblemSpec:
    """Problem spec with ``theta*`` estimated from the data and Uniform[0, 1] costs."""
    rng = np.random.default_rng(rng)
    theta, py = estimate_theta(dataset)
    n, m = theta.shape
    costs = _sample_costs(n, m, rng, tie_cost_columns)
    return ProblemSpec(
        n=n, m=m, decision_prior=py, theta_star=theta, costs=costs,
        prior_alpha0=np.full((n, m), float(prior[0])), prior_beta0=np.full((n, m), float(prior[1])),
    )


def dataset_instances(dataset: Dataset) -> Iterator[Instance]:
    """Rows in file order, cycling forever."""
    if len(dataset) == 0:
        raise DatasetError("dataset has no rows")
    if not dataset.is_binary:
        raise DatasetError("dataset must be binarized before streaming instances")
    while True:
        for x, y in dataset.rows():
            yield Instance(y, tuple(int(v) for v in x))
