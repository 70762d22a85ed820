import csv
import io
from pathlib import Path

import numpy as np
import pytest

from odmbandit import cli
from odmbandit.cli import (
    SERIES_COLUMNS,
    ConfigError,
    ExperimentConfig,
    emit_series,
    main,
    orchestrate,
    parse_config,
    parse_config_text,
    read_ledger,
    summarize_ledgers,
)

MINIMAL = """
[experiment]
policies = W-EC2-TS
T = 100
seeds = 0
"""

TINY = """
[experiment]
policies = W-EC2-TS, All
T = 12
seeds = 0, 1
window = 4

[spec]
n = 3
m = 4
spec_seed = 2
"""


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestParseConfig:
    def test_minimal_defaults(self):
        cfg = parse_config_text(MINIMAL)
        assert cfg.policies == ["W-EC2-TS"] and cfg.T == 100 and cfg.seeds == [0]
        assert (cfg.n, cfg.m, cfg.prior_a, cfg.prior_b, cfg.K) == (5, 20, 2.0, 2.0, 100)
        assert cfg.window == 100 and cfg.source == "synthetic" and cfg.max_tests is None
        assert not cfg.overlap

    def test_defaults_echoed(self):
        cfg = parse_config_text(MINIMAL)
        text = cfg.to_ini()
        for key in ("k = 100", "overlap = false", "max_tests = none", "prior_a = 2.0"):
            assert key in text
        assert parse_config_text(text) == cfg

    def test_window_clamped_to_t(self):
        assert parse_config_text(MINIMAL.replace("T = 100", "T = 30")).window == 30

    @pytest.mark.parametrize("change,match", [
        (("T = 100", "T = 0"), "T must be"),
        (("W-EC2-TS", "W-EC2-Foo"), "valid names: W-EC2-TS"),
        (("seeds = 0", ""), "seeds"),
        (("seeds = 0", "seeds = 0\nbogus = 1"), "bogus"),
        (("[experiment]", "[experimnt]"), "experimnt"),
        (("T = 100", "T = many"), "T"),
    ])
    def test_errors(self, change, match):
        with pytest.raises(ConfigError, match=match):
            parse_config_text(MINIMAL.replace(*change))

    def test_dataset_source(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,b,label\n1,0,x\n0,1,y\n")
        cfg_path = tmp_path / "c.ini"
        cfg_path.write_text(MINIMAL + "\n[spec]\nsource = dataset\npath = d.csv\n")
        cfg = parse_config(cfg_path)
        assert Path(cfg.dataset_path) == tmp_path / "d.csv"
        with pytest.raises(ConfigError, match="path"):
            parse_config_text(MINIMAL + "\n[spec]\nsource = dataset\n")

    def test_shipped_configs_parse(self):
        root = Path(__file__).resolve().parents[1] / "configs"
        nav = parse_config(root / "navigation.ini")
        assert nav.T == 2000 and nav.seeds == [0, 1, 2, 3, 4] and (nav.n, nav.m) == (5, 20)
        assert parse_config(root / "smoke.ini").T == 50


@pytest.fixture
def tiny(tmp_path):
    cfg = parse_config_text(TINY)
    return cfg, orchestrate(cfg, tmp_path / "run")


class TestOrchestrate:
    def test_layout(self, tiny):
        cfg, res = tiny
        assert res.ok and len(res.ledgers) == 4
        names = sorted(p.name for p in res.out_dir.iterdir())
        assert names == sorted([
            "config.ini", "spec.json", "hypotheses.tsv", "summary.csv", "series.csv",
            "ledger_W-EC2-TS_0.csv", "ledger_W-EC2-TS_1.csv", "ledger_All_0.csv", "ledger_All_1.csv",
        ])
        assert [r.policy for r in res.summary.rows] == ["W-EC2-TS", "All"]

    def test_deterministic(self, tiny, tmp_path):
        cfg, res = tiny
        again = orchestrate(cfg, tmp_path / "again", parallelism=2)
        for p in res.out_dir.iterdir():
            assert (again.out_dir / p.name).read_bytes() == p.read_bytes()

    def test_summary_matches_ledgers(self, tiny):
        _, res = tiny
        for row in _rows((res.out_dir / "summary.csv").read_text()):
            files = sorted(res.out_dir.glob(f"ledger_{row['policy']}_*.csv"))
            per_seed = [[float(r["realized_cost"]) for r in _rows(f.read_text())] for f in files]
            flat = [c for s in per_seed for c in s]
            assert float(row["mean_cost"]) == pytest.approx(sum(flat) / len(flat), rel=1e-15)
            assert float(row["std_cost"]) == pytest.approx(np.std([np.mean(s) for s in per_seed], ddof=1), rel=1e-12)
            util = [int(r["utility"]) for f in files for r in _rows(f.read_text())]
            assert float(row["mean_utility"]) == pytest.approx(np.mean(util), rel=1e-15)

    def test_summary_roundtrip_through_files(self, tiny):
        _, res = tiny
        reread = [read_ledger(p) for p in sorted(res.out_dir.glob("ledger_*.csv"))]
        assert summarize_ledgers(reread, ["W-EC2-TS", "All"]).to_csv() == res.summary.to_csv()

    def test_failure_is_isolated(self, tmp_path, monkeypatch):
        real = cli._run_one

        def flaky(job):
            if job[1] == "All" and job[2] == 1:
                raise RuntimeError("boom")
            return real(job)

        monkeypatch.setattr(cli, "_run_one", flaky)
        res = orchestrate(parse_config_text(TINY), tmp_path / "f")
        assert not res.ok and res.failed[0][:2] == ("All", 1)
        assert sum(not l.failed for l in res.ledgers) == 3
        assert "# FAILED" in (tmp_path / "f" / "ledger_All_1.csv").read_text()


class TestSeries:
    def test_window_one_is_raw(self, tiny):
        _, res = tiny
        rows = [r for r in _rows(emit_series(res.ledgers, 1)) if r["policy"] == "All"]
        assert len(rows) == 12
        costs = np.array([l.costs() for l in res.ledgers if l.policy == "All"])
        assert [float(r["mean_cost"]) for r in rows] == pytest.approx(costs.mean(axis=0).tolist(), rel=1e-15)

    def test_window_t_single_row(self, tiny):
        _, res = tiny
        rows = _rows(emit_series(res.ledgers, 12))
        assert len(rows) == 2 and all((r["t_start"], r["t_end"]) == ("1", "12") for r in rows)

    def test_hand_computed_window(self, tiny):
        _, res = tiny
        rows = _rows((res.out_dir / "series.csv").read_text())
        assert list(rows[0].keys()) == list(SERIES_COLUMNS)
        ts = sorted((l for l in res.ledgers if l.policy == "W-EC2-TS"), key=lambda l: l.seed)
        row = [r for r in rows if r["policy"] == "W-EC2-TS" and r["t_start"] == "5"][0]
        per_seed = [sum(l.records[k].realized_cost for k in range(4, 8)) / 4 for l in ts]
        assert float(row["mean_cost"]) == pytest.approx(sum(per_seed) / 2, rel=1e-14)
        assert float(row["std_cost"]) == pytest.approx(abs(per_seed[0] - per_seed[1]) / np.sqrt(2), rel=1e-12)
        cum = [sum(r.regret_step for r in l.records[:8]) for l in ts]
        assert float(row["mean_cumulative_regret"]) == pytest.approx(np.mean(cum), rel=1e-12, abs=1e-15)

    def test_window_too_large(self, tiny):
        _, res = tiny
        with pytest.raises(ValueError, match="exceeds"):
            emit_series(res.ledgers, 13)


class TestMain:
    def _write(self, tmp_path, text=TINY):
        p = tmp_path / "c.ini"
        p.write_text(text)
        return p

    def test_run_and_summarize(self, tmp_path, capsys):
        cfg = self._write(tmp_path)
        assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0
        assert "W-EC2-TS" in capsys.readouterr().out
        before = (tmp_path / "o" / "summary.csv").read_text()
        assert main(["summarize", str(tmp_path / "o"), "--window", "6"]) == 0
        assert (tmp_path / "o" / "summary.csv").read_text() == before
        assert len(_rows((tmp_path / "o" / "series.csv").read_text())) == 4

    def test_trace(self, tmp_path, capsys):
        cfg = self._write(tmp_path)
        assert main(["trace", str(cfg), "--policy", "W-IG-TS", "--seed", "0", "--steps", "2"]) == 0
        out = capsys.readouterr().out
        assert out.count("# t=") == 2 and "step,test,gain,cost,outcome" in out

    def test_bad_config_exit_code(self, tmp_path, capsys):
        assert main(["run", str(self._write(tmp_path, MINIMAL.replace("T = 100", "T = 0")))]) == 2
        assert "T must be" in capsys.readouterr().err
        assert main(["run", str(tmp_path / "missing.ini")]) == 2

    def test_failed_run_exit_code(self, tmp_path, monkeypatch):
        def broken(job):
            raise RuntimeError("boom")

        monkeypatch.setattr(cli, "_run_one", broken)
        assert main(["run", str(self._write(tmp_path)), "--out", str(tmp_path / "o")]) == 1


def test_config_invariants():
    with pytest.raises(ConfigError):
        ExperimentConfig(policies=[], T=5, seeds=[0])
    with pytest.raises(ConfigError):
        ExperimentConfig(policies=["All"], T=5, seeds=[0, 0], window=5)
    with pytest.raises(ConfigError, match="window"):
        ExperimentConfig(policies=["All"], T=5, seeds=[0], window=6)
