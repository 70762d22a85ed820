"""Experiment front end: configs, multi-seed orchestration and summaries.

Usage::

    odmbandit run CONFIG [--out DIR] [--parallelism N]
    odmbandit summarize DIR [--window W]
    odmbandit trace CONFIG --policy P --seed S --steps N
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .bandit import (
    LEDGER_COLUMNS,
    Policy,
    RunLedger,
    build_space,
    config_digest,
    run_experiment,
    valid_policy_names,
)
from .env import ProblemSpec, binarize_dataset, dataset_instances, generate_navigation, load_dataset, spec_from_dataset
from .hypothesis import HypothesisSpace
from .oracle import EPSILON_COST, OracleConfig

log = logging.getLogger("odmbandit")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    policies: list[str]
    T: int
    seeds: list[int]
    name: str = "experiment"
    output_dir: str = "out"
    window: int = 100
    parallelism: int = 1
    # problem source
    source: str = "synthetic"
    n: int = 5
    m: int = 20
    prior_a: float = 2.0
    prior_b: float = 2.0
    spec_seed: int = 0
    tie_cost_columns: bool = False
    dataset_path: str = ""
    label_column: str = "label"
    # oracle / hypothesis space
    K: int = 100
    overlap: bool = False
    max_tests: int | None = None
    epsilon_cost: float = EPSILON_COST

    def __post_init__(self):
        if not self.policies:
            raise ConfigError("at least one policy is required")
        for p in self.policies:
            try:
                Policy.parse(p)
            except ValueError:
                raise ConfigError(f"unknown policy {p!r}; valid names: {', '.join(valid_policy_names())}") from None
        self.policies = [Policy.parse(p).label for p in self.policies]
        if len(set(self.policies)) != len(self.policies):
            raise ConfigError("duplicate policy")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("duplicate seed")
        if self.window < 1 or self.window > self.T:
            raise ConfigError(f"window must lie in [1, T={self.T}], got {self.window}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.source not in ("synthetic", "dataset"):
            raise ConfigError(f"source must be 'synthetic' or 'dataset', got {self.source!r}")
        if self.source == "dataset" and not self.dataset_path:
            raise ConfigError("dataset source requires 'path'")
        if self.n < 1 or self.m < 1:
            raise ConfigError("n and m must be >= 1")
        if self.prior_a <= 0 or self.prior_b <= 0:
            raise ConfigError("Beta prior hyperparameters must be positive")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.max_tests is not None and self.max_tests < 0:
            raise ConfigError("max_tests must be >= 0")
        if not self.epsilon_cost > 0:
            raise ConfigError("epsilon_cost must be positive")

    def oracle_config(self) -> OracleConfig:
        return OracleConfig(epsilon_cost=self.epsilon_cost, max_tests=self.max_tests)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {
            "name": self.name,
            "policies": ", ".join(self.policies),
            "T": str(self.T),
            "seeds": ", ".join(str(s) for s in self.seeds),
            "output_dir": self.output_dir,
            "window": str(self.window),
            "parallelism": str(self.parallelism),
        }
        cp["spec"] = {
            "source": self.source,
            "n": str(self.n),
            "m": str(self.m),
            "prior_a": repr(self.prior_a),
            "prior_b": repr(self.prior_b),
            "spec_seed": str(self.spec_seed),
            "tie_cost_columns": str(self.tie_cost_columns).lower(),
            "path": self.dataset_path,
            "label_column": self.label_column,
        }
        cp["oracle"] = {
            "K": str(self.K),
            "overlap": str(self.overlap).lower(),
            "max_tests": "none" if self.max_tests is None else str(self.max_tests),
            "epsilon_cost": repr(self.epsilon_cost),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in ("output_dir", "parallelism"):
            d.pop(k)
        return config_digest(sorted(d.items()))


_KNOWN = {
    "experiment": {"name", "policies", "t", "seeds", "output_dir", "window", "parallelism"},
    "spec": {"source", "n", "m", "prior_a", "prior_b", "spec_seed", "tie_cost_columns", "path", "label_column"},
    "oracle": {"k", "overlap", "max_tests", "epsilon_cost"},
}


def _split(text: str) -> list[str]:
    return [tok.strip() for tok in text.replace("\n", ",").split(",") if tok.strip()]


def parse_config_text(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in cp.sections():
        if section not in _KNOWN:
            raise ConfigError(f"unknown section [{section}]")
        extra = set(cp[section]) - _KNOWN[section]
        if extra:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(extra))}")
    if not cp.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    exp = cp["experiment"]
    spec = cp["spec"] if cp.has_section("spec") else {}
    orc = cp["oracle"] if cp.has_section("oracle") else {}

    def need(section, key):
        if key not in section:
            raise ConfigError(f"missing required field '{key}' in [experiment]")
        return section[key]

    def as_int(value, key):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"field '{key}' must be an integer, got {value!r}") from None

    def as_float(value, key):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"field '{key}' must be a number, got {value!r}") from None

    def as_bool(value, key):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"field '{key}' must be a boolean, got {value!r}")

    kwargs: dict = {
        "policies": _split(need(exp, "policies")),
        "T": as_int(need(exp, "t"), "T"),
        "seeds": [as_int(s, "seeds") for s in _split(need(exp, "seeds"))],
    }
    if "name" in exp:
        kwargs["name"] = exp["name"]
    if "output_dir" in exp:
        kwargs["output_dir"] = exp["output_dir"]
    for key in ("window", "parallelism"):
        if key in exp:
            kwargs[key] = as_int(exp[key], key)
    if "source" in spec:
        kwargs["source"] = spec["source"].strip()
    for key in ("n", "m", "spec_seed"):
        if key in spec:
            kwargs[key] = as_int(spec[key], key)
    for key in ("prior_a", "prior_b"):
        if key in spec:
            kwargs[key] = as_float(spec[key], key)
    if "tie_cost_columns" in spec:
        kwargs["tie_cost_columns"] = as_bool(spec["tie_cost_columns"], "tie_cost_columns")
    if spec.get("path"):
        path = Path(spec["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        kwargs["dataset_path"] = str(path)
    if "label_column" in spec:
        kwargs["label_column"] = spec["label_column"]
    if "k" in orc:
        kwargs["K"] = as_int(orc["k"], "K")
    if "overlap" in orc:
        kwargs["overlap"] = as_bool(orc["overlap"], "overlap")
    if "max_tests" in orc:
        v = orc["max_tests"].strip().lower()
        kwargs["max_tests"] = None if v in ("", "none") else as_int(v, "max_tests")
    if "epsilon_cost" in orc:
        kwargs["epsilon_cost"] = as_float(orc["epsilon_cost"], "epsilon_cost")
    if "window" not in kwargs:
        kwargs["window"] = min(100, kwargs["T"]) if kwargs["T"] >= 1 else 100
    return ExperimentConfig(**kwargs)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), base_dir=path.parent)


# ---------------------------------------------------------------------------
# problem construction and orchestration


@dataclass
class Problem:
    spec: ProblemSpec
    space: HypothesisSpace
    dataset: object | None = None

    def instances(self, seed: int):
        if self.dataset is None:
            return None
        return dataset_instances(self.dataset)


def build_problem(config: ExperimentConfig) -> Problem:
    if config.source == "synthetic":
        spec = generate_navigation(
            config.n, config.m, (config.prior_a, config.prior_b), config.spec_seed,
            tie_cost_columns=config.tie_cost_columns,
        )
        dataset = None
    else:
        dataset = load_dataset(config.dataset_path, config.label_column)
        if not dataset.is_binary:
            log.info("binarizing non-binary columns %s at their medians", dataset.non_binary)
            dataset = binarize_dataset(dataset)
        spec = spec_from_dataset(dataset, config.spec_seed, (config.prior_a, config.prior_b), config.tie_cost_columns)
    return Problem(spec, build_space(spec, config.K, config.overlap), dataset)


def _run_one(args) -> RunLedger:
    config, policy, seed = args
    problem = build_problem(config)
    return run_experiment(
        problem.spec, policy, config.T, seed,
        space=problem.space, oracle_cfg=config.oracle_config(),
        instances=problem.instances(seed), digest=config.digest(),
    )


@dataclass
class SummaryRow:
    policy: str
    n_seeds: int
    mean_cost: float
    std_cost: float
    mean_expected_cost: float
    std_expected_cost: float
    mean_regret: float
    final_cumulative_regret: float
    mean_utility: float
    std_utility: float


@dataclass
class SummaryTable:
    rows: list[SummaryRow] = field(default_factory=list)

    def row(self, policy: str) -> SummaryRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(policy)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(SummaryRow)]
        buf.write(",".join(names) + "\n")
        for r in self.rows:
            vals = [getattr(r, k) for k in names]
            buf.write(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, int) else f"{v:.17g}") for v in vals) + "\n")
        return buf.getvalue()

    def render(self) -> str:
        lines = [f"{'policy':<14} {'cost':>18} {'utility':>8} {'regret/step':>12}"]
        for r in self.rows:
            lines.append(f"{r.policy:<14} {r.mean_cost:>8.3f} ± {r.std_cost:<7.3f} {r.mean_utility:>8.3f} {r.mean_regret:>12.4f}")
        return "\n".join(lines)


def _std(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def summarize_ledgers(ledgers: Sequence[RunLedger], policy_order: Sequence[str] | None = None) -> SummaryTable:
    """Per-policy statistics; ``std`` is the spread of per-seed means across seeds."""
    by_policy: dict[str, list[RunLedger]] = {}
    for led in ledgers:
        by_policy.setdefault(led.policy, []).append(led)
    order = list(policy_order) if policy_order else sorted(by_policy)
    table = SummaryTable()
    for pol in order:
        runs = sorted(by_policy.get(pol, []), key=lambda l: l.seed)
        runs = [r for r in runs if len(r)]
        if not runs:
            continue
        costs = [r.costs() for r in runs]
        exp = [r.expected_costs() for r in runs]
        util = [r.utilities() for r in runs]
        reg = [r.regrets() for r in runs]
        table.rows.append(SummaryRow(
            policy=pol,
            n_seeds=len(runs),
            mean_cost=float(np.concatenate(costs).mean()),
            std_cost=_std([c.mean() for c in costs]),
            mean_expected_cost=float(np.concatenate(exp).mean()),
            std_expected_cost=_std([c.mean() for c in exp]),
            mean_regret=float(np.concatenate(reg).mean()),
            final_cumulative_regret=float(np.mean([r.sum() for r in reg])),
            mean_utility=float(np.concatenate(util).mean()),
            std_utility=_std([u.mean() for u in util]),
        ))
    return table


SERIES_COLUMNS = (
    "policy", "t_start", "t_end", "n_seeds", "mean_cost", "std_cost", "mean_regret", "std_regret",
    "mean_cumulative_regret", "std_cumulative_regret", "mean_utility", "std_utility",
)


def emit_series(ledgers: Sequence[RunLedger], window: int, policy_order: Sequence[str] | None = None) -> str:
    """Non-overlapping window means per policy; mean and std across seeds for each window."""
    if window < 1:
        raise ValueError("window must be >= 1")
    by_policy: dict[str, list[RunLedger]] = {}
    for led in ledgers:
        by_policy.setdefault(led.policy, []).append(led)
    order = list(policy_order) if policy_order else sorted(by_policy)
    buf = io.StringIO()
    buf.write(",".join(SERIES_COLUMNS) + "\n")
    for pol in order:
        runs = sorted(by_policy.get(pol, []), key=lambda l: l.seed)
        if not runs:
            continue
        T = min(len(r) for r in runs)
        if T == 0:
            continue
        if window > T:
            raise ValueError(f"window {window} exceeds the run length {T}")
        cost = np.array([r.costs()[:T] for r in runs])
        reg = np.array([r.regrets()[:T] for r in runs])
        cum = np.cumsum(reg, axis=1)
        util = np.array([r.utilities()[:T] for r in runs], dtype=float)
        for start in range(0, T, window):
            end = min(start + window, T)
            sl = slice(start, end)
            vals = []
            for arr in (cost, reg):
                per_seed = arr[:, sl].mean(axis=1)
                vals += [per_seed.mean(), _std(per_seed)]
            end_cum = cum[:, end - 1]
            vals += [end_cum.mean(), _std(end_cum)]
            per_seed = util[:, sl].mean(axis=1)
            vals += [per_seed.mean(), _std(per_seed)]
            buf.write(",".join([pol, str(start + 1), str(end), str(len(runs))] + [f"{v:.17g}" for v in vals]) + "\n")
    return buf.getvalue()


def ledger_filename(policy: str, seed: int) -> str:
    return f"ledger_{policy}_{seed}.csv"


@dataclass
class Outcome:
    ledgers: list[RunLedger]
    summary: SummaryTable
    out_dir: Path
    failed: list[tuple[str, int, str]]

    @property
    def ok(self) -> bool:
        return not self.failed


def orchestrate(config: ExperimentConfig, out_dir=None, parallelism: int | None = None) -> Outcome:
    """Run every (policy, seed) pair and write ledgers, summary and series to ``out_dir``."""
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = parallelism or config.parallelism
    problem = build_problem(config)
    (out / "config.ini").write_text(config.to_ini(), encoding="utf-8")
    (out / "spec.json").write_text(problem.spec.to_json() + "\n", encoding="utf-8")
    (out / "hypotheses.tsv").write_text(problem.space.to_table(), encoding="utf-8")

    jobs = [(config, pol, seed) for pol in config.policies for seed in config.seeds]
    ledgers: list[RunLedger] = []
    failed: list[tuple[str, int, str]] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, job) for job in jobs]
            results = []
            for job, fut in zip(jobs, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:  # worker crash: isolate it
                    led = RunLedger(Policy.parse(job[1]).label, job[2], config.digest(), failed=True, error=repr(exc))
                    results.append(led)
    else:
        results = []
        for job in jobs:
            try:
                results.append(_run_one(job))
            except Exception as exc:
                results.append(RunLedger(Policy.parse(job[1]).label, job[2], config.digest(), failed=True, error=repr(exc)))
    for led in results:
        (out / ledger_filename(led.policy, led.seed)).write_text(led.to_csv(), encoding="utf-8")
        if led.failed:
            failed.append((led.policy, led.seed, led.error or ""))
            log.error("run %s seed %s failed: %s", led.policy, led.seed, led.error)
        ledgers.append(led)

    summary = summarize_ledgers(ledgers, config.policies)
    (out / "summary.csv").write_text(summary.to_csv(), encoding="utf-8")
    complete = [l for l in ledgers if not l.failed]
    (out / "series.csv").write_text(emit_series(complete, config.window, config.policies), encoding="utf-8")
    return Outcome(ledgers, summary, out, failed)


def read_ledger(path) -> RunLedger:
    """Load a ledger CSV written by :meth:`RunLedger.to_csv` (super arms are not reconstructed)."""
    from .bandit import StepRecord
    from .oracle import SuperArm

    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != LEDGER_COLUMNS:
        raise ValueError(f"{path}: not a ledger file")
    records, policy, seed = [], None, None
    for row in reader:
        policy, seed = row["policy"], int(row["seed"])
        records.append(StepRecord(
            t=int(row["t"]),
            superarm=SuperArm(int(row["correct_decision"]), list(range(int(row["n_tests"])))),
            realized_cost=float(row["realized_cost"]),
            expected_cost_true=float(row["expected_cost_true"]),
            regret_step=float(row["regret_step"]),
            decision_made=int(row["decision_made"]),
            correct_decision=int(row["correct_decision"]),
            utility=int(row["utility"]),
            flag=row["flag"] or None,
        ))
    if policy is None:
        stem = path.stem.split("_")
        policy, seed = "_".join(stem[1:-1]), int(stem[-1])
    return RunLedger(policy, seed, records=records, failed="# FAILED" in text)


# ---------------------------------------------------------------------------
# command line


def _cmd_run(args) -> int:
    config = parse_config(args.config)
    result = orchestrate(config, args.out, args.parallelism)
    print(result.summary.render())
    print(f"outputs written to {result.out_dir}")
    if result.failed:
        for pol, seed, err in result.failed:
            print(f"FAILED {pol} seed {seed}: {err}", file=sys.stderr)
        return 1
    return 0


def _cmd_summarize(args) -> int:
    d = Path(args.dir)
    files = sorted(d.glob("ledger_*.csv"))
    if not files:
        print(f"no ledger files in {d}", file=sys.stderr)
        return 2
    ledgers = [read_ledger(f) for f in files]
    order = None
    if (d / "config.ini").exists():
        order = parse_config(d / "config.ini").policies
    summary = summarize_ledgers([l for l in ledgers if not l.failed], order)
    (d / "summary.csv").write_text(summary.to_csv(), encoding="utf-8")
    if args.window:
        (d / "series.csv").write_text(emit_series([l for l in ledgers if not l.failed], args.window, order), encoding="utf-8")
    print(summary.render())
    return 1 if any(l.failed for l in ledgers) else 0


def _cmd_trace(args) -> int:
    config = parse_config(args.config)
    problem = build_problem(config)
    out = sys.stdout

    def on_step(record):
        arm = record.superarm
        out.write(f"# t={record.t} correct={record.correct_decision} decision={record.decision_made} "
                  f"cost={record.realized_cost:.17g}{' flag=' + record.flag if record.flag else ''}\n")
        out.write(arm.trace_text())

    policy = Policy.parse(args.policy)
    ledger = run_experiment(
        problem.spec, policy, args.steps, args.seed, space=problem.space,
        oracle_cfg=config.oracle_config(), instances=problem.instances(args.seed), on_step=on_step,
    )
    if ledger.failed:
        print(f"FAILED: {ledger.error}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odmbandit", description="Cost-efficient online decision making experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every (policy, seed) pair of a config")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--parallelism", type=int, default=None)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("summarize", help="recompute summary.csv from the ledgers in a directory")
    p.add_argument("dir")
    p.add_argument("--window", type=int, default=None, help="also rewrite series.csv with this window")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("trace", help="print per-episode oracle traces")
    p.add_argument("config")
    p.add_argument("--policy", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=5)
    p.set_defaults(func=_cmd_trace)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
