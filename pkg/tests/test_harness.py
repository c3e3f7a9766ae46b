import csv
import json

import numpy as np
import pytest

from bell_lab import harness
from bell_lab.apparatus import EventLog
from bell_lab.harness import ExperimentConfig, bundled_config, main, parse_grid

SCENARIOS = ["quantum-ideal", "gg-adversary", "locality-adversary", "guess-mixture", "switch-compare"]


def write_config(tmp_path, name="quantum-ideal", **changes):
    doc = json.loads(bundled_config(name).read_text())
    doc.update(changes)
    doc["out_dir"] = str(tmp_path / "out")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def results(path):
    return json.loads((path / "results.json").read_text())


class TestConfig:
    @pytest.mark.parametrize("name", SCENARIOS)
    def test_bundled_configs_validate(self, name):
        cfg = ExperimentConfig.load(bundled_config(name))
        assert cfg.doc["window_ns"] == 250 and len(cfg.config_hash) == 64

    def test_unknown_key_rejected(self):
        raw = json.loads(bundled_config("quantum-ideal").read_text())
        raw["alice"]["colour"] = "blue"
        with pytest.raises(harness.ConfigError, match="alice"):
            ExperimentConfig.from_dict(raw)

    def test_hash_ignores_output_path(self):
        raw = json.loads(bundled_config("quantum-ideal").read_text())
        h1 = ExperimentConfig.from_dict(raw).config_hash
        raw["out_dir"] = "elsewhere"
        assert ExperimentConfig.from_dict(raw).config_hash == h1
        raw["seed"] = 2
        assert ExperimentConfig.from_dict(raw).config_hash != h1

    def test_json_error_has_position(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "n_trials": 5,\n  oops\n}')
        with pytest.raises(harness.ConfigError, match=r"bad.json:3:"):
            ExperimentConfig.load(p)

    def test_parse_grid(self):
        assert np.allclose(parse_grid("0.9:1.0:3"), [0.9, 0.95, 1.0])
        assert parse_grid("1:1:1").tolist() == [1.0]
        for bad in ("0.9:1.0", "a:b:c", "0.9:1.0:0"):
            with pytest.raises(harness.ConfigError):
                parse_grid(bad)


class TestRun:
    def test_quickstart(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg)]) == 0
        out = tmp_path / "out"
        doc = results(out)
        assert doc["s"] == pytest.approx(2.828, abs=0.02)
        assert doc["violates"] is True
        for name in ("alice.ndjson", "bob.ndjson", "metadata.json", "pairs.csv"):
            assert (out / name).exists()
        assert "S = 2.8" in capsys.readouterr().out

    def test_zero_trials(self, tmp_path):
        assert main(["run", "--config", str(write_config(tmp_path, n_trials=0))]) == 2

    def test_missing_config_is_io_error(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 3

    def test_deterministic(self, tmp_path):
        cfg = write_config(tmp_path, "gg-adversary", n_trials=20000)
        texts = []
        for i in range(2):
            assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / f"r{i}")]) == 0
            texts.append((tmp_path / f"r{i}" / "results.json").read_text())
        assert texts[0] == texts[1]

    def test_config_hash_in_log_header(self, tmp_path):
        cfg = write_config(tmp_path, n_trials=100)
        assert main(["run", "--config", str(cfg)]) == 0
        log = EventLog.load(tmp_path / "out" / "alice.ndjson")
        assert log.header["config_hash"] == ExperimentConfig.load(cfg).config_hash
        assert results(tmp_path / "out")["config_hash"] == log.header["config_hash"]


class TestAnalyze:
    @pytest.fixture
    def logs(self, tmp_path):
        cfg = write_config(tmp_path, n_trials=40000)
        assert main(["run", "--config", str(cfg)]) == 0
        return tmp_path / "out"

    def test_roundtrip_same_s(self, logs, tmp_path):
        ana = tmp_path / "ana"
        rc = main(["analyze", str(logs / "alice.ndjson"), str(logs / "bob.ndjson"),
                   "--metadata", str(logs / "metadata.json"), "--out-dir", str(ana)])
        assert rc == 0
        a, b = results(logs), results(ana)
        assert a["s"] == b["s"] and a["pairs"] == b["pairs"]

    def test_truncated_bob(self, logs, tmp_path):
        lines = (logs / "bob.ndjson").read_text().splitlines(keepends=True)
        short = tmp_path / "bob_short.ndjson"
        short.write_text("".join(lines[:10001]))
        assert main(["analyze", str(logs / "alice.ndjson"), str(short), "--out-dir", str(tmp_path / "t")]) == 0
        full, trunc = results(logs), results(tmp_path / "t")
        assert trunc["coincidences_total"] < full["coincidences_total"]
        assert trunc["stderr_s"] > full["stderr_s"]

    def test_zero_coincidence_pair(self, logs, tmp_path, capsys):
        lines = (logs / "bob.ndjson").read_text().splitlines(keepends=True)
        kept = [lines[0]] + [ln for ln in lines[1:] if '"setting": "b2"' not in ln]
        assert len(kept) < len(lines)
        only_b = tmp_path / "bob_b.ndjson"
        only_b.write_text("".join(kept))
        rc = main(["analyze", str(logs / "alice.ndjson"), str(only_b), "--out-dir", str(tmp_path / "z")])
        assert rc == 4
        assert "a,b2" in capsys.readouterr().err

    def test_malformed_record(self, logs, tmp_path, capsys):
        lines = (logs / "bob.ndjson").read_text().splitlines(keepends=True)
        lines[5] = '{"trial": 4, "t_ns": "late"}\n'
        bad = tmp_path / "bob_bad.ndjson"
        bad.write_text("".join(lines))
        assert main(["analyze", str(logs / "alice.ndjson"), str(bad), "--out-dir", str(tmp_path / "m")]) == 2
        assert "record 5" in capsys.readouterr().err

    def test_all_trials_without_metadata(self, logs, tmp_path):
        rc = main(["analyze", str(logs / "alice.ndjson"), str(logs / "bob.ndjson"),
                   "--estimator", "all-trials", "--out-dir", str(tmp_path / "x")])
        assert rc == 2

    def test_swapped_logs(self, logs, tmp_path):
        rc = main(["analyze", str(logs / "bob.ndjson"), str(logs / "alice.ndjson"), "--out-dir", str(tmp_path / "s")])
        assert rc == 2


class TestScanEta:
    def test_default_grid(self, tmp_path, capsys):
        assert main(["scan-eta", "--out-dir", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "scan.json").read_text())
        assert 0.818 <= doc["critical_efficiency"] <= 0.838
        with open(tmp_path / "eta_scan.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 10 and set(rows[0]) == {"eta", "S_max_LP", "S_max_fallback", "gap"}
        assert "critical efficiency" in capsys.readouterr().out

    def test_above_threshold(self, tmp_path):
        assert main(["scan-eta", "--grid", "0.9:1.0:5", "--out-dir", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "scan.json").read_text())
        assert all(g["s_max"] < 2.828 for g in doc["grid"])

    def test_single_point(self, tmp_path):
        assert main(["scan-eta", "--grid", "1:1:1", "--out-dir", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "scan.json").read_text())
        assert doc["grid"][0]["s_max"] == pytest.approx(2.0, abs=1e-9)

    def test_monte_carlo_overlay(self, tmp_path):
        assert main(["scan-eta", "--grid", "0.8:0.9:2", "--mc", "20000", "--out-dir", str(tmp_path)]) == 0
        with open(tmp_path / "eta_scan.csv") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            assert abs(float(r["S_mc"]) - float(r["S_max_LP"])) < 5 * float(r["stderr_mc"])

    def test_bad_grid(self, tmp_path):
        assert main(["scan-eta", "--grid", "nope", "--out-dir", str(tmp_path)]) == 2


class TestCompareSwitch:
    def run(self, tmp_path, capsys, *extra):
        assert main(["compare-switch", "--out-dir", str(tmp_path), *extra]) == 0
        return json.loads((tmp_path / "compare_switch.json").read_text()), capsys.readouterr().out

    def test_defaults(self, tmp_path, capsys):
        doc, out = self.run(tmp_path, capsys)
        assert "indistinguishable: true" in out
        assert doc["closed_form_max_diff"] <= 1e-12 and doc["monte_carlo_consistent"]

    def test_equal_transmissions(self, tmp_path, capsys):
        doc, out = self.run(tmp_path, capsys, "--active-transmission", "0.5", "--passive-transmission", "0.5")
        assert "indistinguishable: false" in out
        assert not doc["monte_carlo_consistent"]

    def test_small_sample(self, tmp_path, capsys):
        doc, out = self.run(tmp_path, capsys, "--n", "100")
        assert "insufficient samples" in out
        assert not doc["monte_carlo_conclusive"]
