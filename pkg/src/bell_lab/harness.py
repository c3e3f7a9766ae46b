"""Command line entry point and scenario orchestration.

Exit codes: 0 success, 2 config or parse error, 3 I/O error, 4 analysis
undefined (a setting pair without coincidences).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import analysis, apparatus, lhvopt, sources
from .apparatus import DetectorConfig, EventLog, LogFormatError, RunMetadata, StationConfig, SwitchKind
from .core import BellLabError, ConfigurationError, ModelDefinitionError, Outcome, Station

log = logging.getLogger("bell_lab")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_UNDEFINED = 0, 2, 3, 4

_STATION_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "switch": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["active", "passive"]},
                "transmission": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "efficiency": {"type": "number", "minimum": 0, "maximum": 1},
        "dark_rate": {"type": "number", "minimum": 0},
        "jitter_ns": {"type": "number", "minimum": 0},
        "delay_ns": {"type": "integer", "minimum": 0},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["source", "n_trials", "seed"],
    "properties": {
        "source": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["quantum", "gg", "locality", "guess-mixture", "random-lhv", "mixture"]},
                "w": {"type": "number", "minimum": 0, "maximum": 1},
                "weights": {"type": "array", "items": {"type": "number", "minimum": 0},
                            "minItems": 81, "maxItems": 81},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "alice": _STATION_SCHEMA,
        "bob": _STATION_SCHEMA,
        "angles_deg": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "number"} for k in ("a", "a2", "b", "b2")},
        },
        "n_trials": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "period_ns": {"type": "integer", "minimum": 2},
        "window_ns": {"type": "integer", "minimum": 0},
        "estimator": {"enum": list(analysis.ESTIMATORS)},
        "violation_k": {"type": "number", "exclusiveMinimum": 0},
        "out_dir": {"type": "string"},
    },
}

_STATION_DEFAULTS = {"switch": {"kind": "active", "transmission": 1.0}, "efficiency": 1.0,
                     "dark_rate": 0.0, "jitter_ns": 1.0}
_DEFAULTS = {
    "angles_deg": {"a": 0.0, "a2": 45.0, "b": 22.5, "b2": -22.5},
    "period_ns": apparatus.DEFAULT_PERIOD_NS,
    "estimator": "conditional",
    "violation_k": 3.0,
    "out_dir": "out",
}


class ConfigError(BellLabError):
    pass


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


@dataclass
class ExperimentConfig:
    doc: dict  # validated, defaults filled

    @classmethod
    def from_dict(cls, raw: dict, source_name: str = "<config>") -> "ExperimentConfig":
        validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
        errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
        if errors:
            lines = [f"{source_name}: {'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
                     for e in errors]
            raise ConfigError("\n".join(lines))
        doc = _merge(_DEFAULTS, raw)
        for st in ("alice", "bob"):
            doc[st] = _merge(_STATION_DEFAULTS, raw.get(st, {}))
            doc[st].setdefault("delay_ns", doc["period_ns"] // 2)
            if doc[st]["delay_ns"] >= doc["period_ns"]:
                raise ConfigError(f"{source_name}: {st}.delay_ns: must be smaller than period_ns")
        doc.setdefault("window_ns", doc["period_ns"] // 4)
        src = doc["source"]
        if src["kind"] == "mixture" and "weights" not in src:
            raise ConfigError(f"{source_name}: source.weights: required for kind 'mixture'")
        if src["kind"] == "mixture" and abs(sum(src["weights"]) - 1.0) > 1e-9:
            raise ConfigError(f"{source_name}: source.weights: must sum to 1")
        return cls(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text(encoding="utf-8")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_dict(raw, str(path))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        raw = copy.deepcopy(self.doc)
        raw.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.from_dict(raw)

    def canonical(self) -> str:
        body = {k: v for k, v in self.doc.items() if k != "out_dir"}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def station(self, which: Station) -> StationConfig:
        d = self.doc[which.value]
        ang = self.doc["angles_deg"]
        primary, alternate = (ang["a"], ang["a2"]) if which is Station.ALICE else (ang["b"], ang["b2"])
        return StationConfig.make(
            which, primary, alternate,
            switch=SwitchKind(d["switch"]["kind"], d["switch"].get("transmission", 1.0)),
            detectors=DetectorConfig(d["efficiency"], d["dark_rate"]),
            jitter_ns=d["jitter_ns"], delay_ns=d["delay_ns"],
        )

    def source(self):
        params = {k: v for k, v in self.doc["source"].items() if k != "kind"}
        if self.doc["source"]["kind"] == "random-lhv":
            params.setdefault("seed", self.doc["seed"])
        return sources.make_source(self.doc["source"]["kind"], **params)


def bundled_config(name: str) -> Path:
    return Path(str(resources.files("bell_lab") / "configs" / f"{name}.json"))


# -- commands -----------------------------------------------------------------


def _analyze_and_write(alice: EventLog, bob: EventLog, out_dir: Path, *, window_ns: int,
                       estimator: str, k: float, metadata: RunMetadata | None, extra: dict) -> tuple[dict, analysis.ChshResult]:
    table = analysis.pair_coincidences(alice, bob, window_ns, metadata=metadata)
    result = analysis.chsh(table, k=k, estimator=estimator)
    eff = analysis.efficiency_estimate(table, metadata) if metadata is not None else None
    doc = analysis.results_document(table, result, efficiency=eff,
                                    extra={"window_ns": window_ns, **extra})
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis.write_results_json(out_dir / "results.json", doc)
    analysis.write_pairs_csv(out_dir / "pairs.csv", table, result)
    return doc, result


def _summary(result: analysis.ChshResult) -> str:
    verdict = "VIOLATED" if result.violates else "not violated"
    return (f"S = {result.s:.4f} +/- {result.stderr_s:.4f} ({result.estimator}); "
            f"CHSH bound {verdict} at {result.k:g} sigma")


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    cfg = cfg.with_overrides(seed=args.seed, window_ns=args.window_ns, estimator=args.estimator,
                             out_dir=args.out_dir)
    doc = cfg.doc
    run = apparatus.run_experiment(cfg.source(), cfg.station(Station.ALICE), cfg.station(Station.BOB),
                                   doc["n_trials"], doc["seed"], period_ns=doc["period_ns"],
                                   config_hash=cfg.config_hash)
    out = Path(doc["out_dir"])
    apparatus.write_logs(run, out)
    (out / "metadata.json").write_text(json.dumps(run.metadata.to_dict(), indent=2, sort_keys=True) + "\n")
    _, result = _analyze_and_write(run.alice, run.bob, out, window_ns=doc["window_ns"],
                                   estimator=doc["estimator"], k=doc["violation_k"],
                                   metadata=run.metadata,
                                   extra={"config_hash": cfg.config_hash, "source": doc["source"]["kind"],
                                          "scenario": run.metadata.scenario})
    print(_summary(result))
    return EXIT_OK


def cmd_analyze(args) -> int:
    alice = EventLog.load(args.alice_log)
    bob = EventLog.load(args.bob_log)
    if alice.station is not Station.ALICE or bob.station is not Station.BOB:
        raise ConfigError("expected an alice log followed by a bob log")
    metadata = None
    if args.metadata:
        metadata = RunMetadata.from_dict(json.loads(Path(args.metadata).read_text()))
    if args.estimator == "all-trials" and metadata is None:
        raise ConfigError("--estimator all-trials needs --metadata (emitted trial counts)")
    window = args.window_ns if args.window_ns is not None else int(alice.header["period_ns"]) // 4
    _, result = _analyze_and_write(alice, bob, Path(args.out_dir), window_ns=window,
                                   estimator=args.estimator, k=args.k, metadata=metadata,
                                   extra={"config_hash": alice.header.get("config_hash")})
    print(_summary(result))
    return EXIT_OK


def parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, steps = text.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError:
        raise ConfigError(f"--grid expects lo:hi:steps, got {text!r}") from None
    if steps < 1 or not 0 < lo <= hi <= 1:
        raise ConfigError(f"--grid needs 0 < lo <= hi <= 1 and steps >= 1, got {text!r}")
    return np.linspace(lo, hi, steps) if steps > 1 else np.array([lo])


def cmd_scan_eta(args) -> int:
    grid = parse_grid(args.grid)
    opts = {"constraint": args.constraint, "inequality": args.inequality, "seed": args.seed}
    rows = lhvopt.scan_efficiency(grid, **opts)
    crit = lhvopt.critical_efficiency(lhvopt.QUANTUM_S, **opts)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mc = {}
    if args.mc:
        alice, bob = apparatus.ideal_stations()
        for r in rows:
            run = apparatus.run_experiment(lhvopt.realize_adversary(r.argmax), alice, bob, args.mc, args.seed)
            table = analysis.pair_coincidences(run.alice, run.bob, apparatus.DEFAULT_PERIOD_NS // 4)
            try:
                res = analysis.chsh(table)
                mc[r.eta] = (res.s, res.stderr_s)
            except analysis.UndefinedCorrelationError:
                mc[r.eta] = (math.nan, math.nan)
    with open(out / "eta_scan.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eta", "S_max_LP", "S_max_fallback", "gap"] + (["S_mc", "stderr_mc"] if mc else []))
        for r in rows:
            w.writerow([repr(float(r.eta)), repr(r.s_lp), repr(r.s_fallback), repr(r.gap)]
                       + (list(map(repr, mc[r.eta])) if mc else []))
    doc = {
        "schema_version": analysis.SCHEMA_VERSION,
        "constraint": args.constraint,
        "inequality": args.inequality,
        "critical_efficiency": crit,
        "target_s": lhvopt.QUANTUM_S,
        "grid": [{"eta": float(r.eta), "s_max": r.s_max, "s_lp": r.s_lp, "s_fallback": r.s_fallback,
                  "flagged": r.flagged} for r in rows],
    }
    analysis.write_results_json(out / "scan.json", doc)
    for r in rows:
        flag = "  (LP/fallback disagree)" if r.flagged else ""
        print(f"eta = {r.eta:.4f}  S_max = {r.s_max:.6f}{flag}")
    print(f"critical efficiency for S = 2*sqrt(2): {crit:.4f}")
    return EXIT_OK


def _switch_grid_max_diff(t_passive: float, t_active: float, eta: float) -> float:
    worst = 0.0
    for p_plus in np.linspace(0, 1, 11):
        for p_minus in np.linspace(0, 1 - p_plus, 6):
            p = (p_plus, p_minus, 1 - p_plus - p_minus)
            act = apparatus.outcome_distribution(
                StationConfig.make(Station.ALICE, 0, 45, switch=SwitchKind.active(t_active),
                                   detectors=DetectorConfig(eta)), p)
            pas = apparatus.outcome_distribution(
                StationConfig.make(Station.ALICE, 0, 45, switch=SwitchKind.passive(t_passive),
                                   detectors=DetectorConfig(eta)), p)
            worst = max(worst, max(abs(act[o] - pas[o]) for o in Outcome))
    return worst


def cmd_compare_switch(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    diff = _switch_grid_max_diff(args.passive_transmission, args.active_transmission, args.efficiency)
    p_micro = (0.5, 0.5, 0.0)
    active = StationConfig.make(Station.ALICE, 0, 45, switch=SwitchKind.active(args.active_transmission),
                                detectors=DetectorConfig(args.efficiency))
    passive = StationConfig.make(Station.ALICE, 0, 45, switch=SwitchKind.passive(args.passive_transmission),
                                 detectors=DetectorConfig(args.efficiency))
    c_act = apparatus.simulate_station_counts(active, p_micro, args.n, args.seed)
    c_pas = apparatus.simulate_station_counts(passive, p_micro, args.n, args.seed + 1)
    cmp = analysis.compare_stations(c_act, c_pas)
    closed_equal = bool(diff <= 1e-12)
    indistinguishable = closed_equal and (cmp.consistent or not cmp.conclusive)
    doc = {
        "schema_version": analysis.SCHEMA_VERSION,
        "active_transmission": args.active_transmission,
        "passive_transmission": args.passive_transmission,
        "efficiency": args.efficiency,
        "closed_form_max_diff": diff,
        "n": args.n,
        "tv_distance": cmp.tv_distance,
        "tv_bound": cmp.bound,
        "monte_carlo_consistent": cmp.consistent,
        "monte_carlo_conclusive": cmp.conclusive,
        "indistinguishable": indistinguishable,
    }
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_results_json(out / "compare_switch.json", doc)
    print(f"closed-form max diff: {diff:.3e}")
    note = "" if cmp.conclusive else "  (insufficient samples: TV test inconclusive)"
    print(f"monte carlo TV: {cmp.tv_distance:.5f} (bound {cmp.bound:.5f}){note}")
    print(f"indistinguishable: {str(indistinguishable).lower()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bell-lab", description="CHSH experiment simulator and analyser")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a configured experiment and analyse it")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out-dir")
    r.add_argument("--window-ns", type=int)
    r.add_argument("--estimator", choices=analysis.ESTIMATORS)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="pair two station logs and estimate S")
    a.add_argument("alice_log")
    a.add_argument("bob_log")
    a.add_argument("--window-ns", type=int)
    a.add_argument("--estimator", choices=analysis.ESTIMATORS, default="conditional")
    a.add_argument("--metadata", help="metadata.json written by 'run' (enables efficiencies)")
    a.add_argument("-k", type=float, default=3.0, help="violation threshold in standard errors")
    a.add_argument("--out-dir", default=".")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("scan-eta", help="maximum local S versus detection efficiency")
    s.add_argument("--grid", default="0.55:1.0:10", help="lo:hi:steps")
    s.add_argument("--constraint", choices=lhvopt.CONSTRAINT_SCOPES, default="independent")
    s.add_argument("--inequality", action="store_true", help="pin detection probabilities from below only")
    s.add_argument("--mc", type=int, default=0, metavar="N", help="overlay N-trial Monte Carlo per grid point")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_scan_eta)

    c = sub.add_parser("compare-switch", help="active versus passive switch station")
    c.add_argument("--active-transmission", type=float, default=0.5)
    c.add_argument("--passive-transmission", type=float, default=1.0)
    c.add_argument("--efficiency", type=float, default=0.8)
    c.add_argument("--n", type=int, default=10**6)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-dir", default=".")
    c.set_defaults(func=cmd_compare_switch)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, ModelDefinitionError, LogFormatError,
            analysis.MetadataUnavailable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except analysis.UndefinedCorrelationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
