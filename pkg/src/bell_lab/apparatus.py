"""Station models, local event logs and the simulation pipeline.

A station receives the source-level ("micro") outcome for its current
setting and applies, in order: switch loss, analyser gating (passive switch
only), detector efficiency and dark counts.  Two switch kinds exist:

* active: the photon is steered to the analyser of the current setting and
  survives with probability ``transmission``;
* passive: a 50/50 splitter sends the photon to either analyser; only the
  selected analyser's detectors are on, so half of the surviving photons
  are never seen.

Hence ``Active(T / 2)`` and ``Passive(T)`` have identical outcome laws.

Trials are clocked at a fixed period.  Detections are stamped at
``t_emit + delay + jitter``; dark counts land uniformly in the trial slot and
the earlier of a dark and a real click is kept.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterator, Mapping, Sequence

import numpy as np

from .core import (
    Angle,
    BellLabError,
    ConfigurationError,
    Label,
    Outcome,
    RngStream,
    Setting,
    Station,
)
from .sources import (
    QuantumSource,
    SettingDependentSource,
    describe,
    sample_responses,
)

DEFAULT_PERIOD_NS = 1000
DEFAULT_CHUNK = 1 << 16

# RngStream roles, one independent stream family each.
ROLE_SOURCE = 1
ROLE_SETTING = {Station.ALICE: 2, Station.BOB: 3}
ROLE_RESPONSE = {Station.ALICE: 4, Station.BOB: 5}
ROLE_STATION = {Station.ALICE: 6, Station.BOB: 7}

SCENARIO_STANDARD = "setting-independent"
SCENARIO_LOCALITY = "locality-loophole"


class LogFormatError(BellLabError):
    def __init__(self, message: str, record: int | None = None):
        super().__init__(message if record is None else f"record {record}: {message}")
        self.record = record


@dataclass(frozen=True)
class SwitchKind:
    kind: str
    transmission: float = 1.0

    def __post_init__(self):
        if self.kind not in ("active", "passive"):
            raise ConfigurationError(f"unknown switch kind {self.kind!r}")
        if not 0.0 <= self.transmission <= 1.0:
            raise ConfigurationError(f"switch transmission must lie in [0, 1], got {self.transmission}")

    @classmethod
    def active(cls, transmission: float = 1.0) -> "SwitchKind":
        return cls("active", transmission)

    @classmethod
    def passive(cls, transmission: float = 1.0) -> "SwitchKind":
        return cls("passive", transmission)

    @property
    def routing(self) -> float:
        """Probability that a surviving photon reaches the selected analyser."""
        return 1.0 if self.kind == "active" else 0.5


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 1.0
    dark_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigurationError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        if self.dark_rate < 0:
            raise ConfigurationError(f"dark_rate must be >= 0, got {self.dark_rate}")


@dataclass(frozen=True)
class StationConfig:
    station: Station
    settings: tuple[Setting, Setting]
    switch: SwitchKind = SwitchKind.active(1.0)
    detectors: DetectorConfig = DetectorConfig()
    jitter_ns: float = 1.0
    delay_ns: int = DEFAULT_PERIOD_NS // 2

    def __post_init__(self):
        if len(self.settings) != 2:
            raise ConfigurationError("a station needs exactly two settings")
        for label, s in zip(Label, self.settings):
            if s.station is not self.station or s.label is not label:
                raise ConfigurationError(f"setting {s} does not belong to slot {label.name} of {self.station.value}")
        if self.jitter_ns < 0:
            raise ConfigurationError("jitter_ns must be >= 0")

    @classmethod
    def make(cls, station: Station, primary_deg: float, alternate_deg: float, **kwargs) -> "StationConfig":
        settings = (
            Setting(station, Label.PRIMARY, Angle.from_degrees(primary_deg)),
            Setting(station, Label.ALTERNATE, Angle.from_degrees(alternate_deg)),
        )
        return cls(station, settings, **kwargs)

    @property
    def angles(self) -> np.ndarray:
        return np.array([s.angle.value for s in self.settings])

    def to_dict(self) -> dict:
        return {
            "station": self.station.value,
            "angles_deg": [s.angle.degrees for s in self.settings],
            "switch": {"kind": self.switch.kind, "transmission": self.switch.transmission},
            "efficiency": self.detectors.efficiency,
            "dark_rate": self.detectors.dark_rate,
            "jitter_ns": self.jitter_ns,
            "delay_ns": self.delay_ns,
        }


@dataclass(frozen=True)
class LocalEvent:
    trial_id: int
    t_ns: int
    setting_label: Label
    outcome: Outcome
    dark: bool = False


# -- closed-form station law ------------------------------------------------

OUTCOME_ORDER = (Outcome.PLUS, Outcome.MINUS, Outcome.NO_DETECT)


def _as_distribution(p) -> np.ndarray:
    if isinstance(p, Mapping):
        p = [p.get(o, 0.0) for o in OUTCOME_ORDER]
    arr = np.asarray(p, dtype=float)
    if arr.shape != (3,) or np.any(arr < -1e-12) or abs(arr.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"not a distribution over (Plus, Minus, NoDetect): {p!r}")
    return arr


def thin(p_micro, transmission: float) -> dict[Outcome, float]:
    """Independent loss stage keeping each click with probability ``transmission``."""
    p = _as_distribution(p_micro)
    plus, minus = transmission * p[0], transmission * p[1]
    return {Outcome.PLUS: plus, Outcome.MINUS: minus, Outcome.NO_DETECT: 1.0 - plus - minus}


def outcome_distribution(config: StationConfig, p_micro) -> dict[Outcome, float]:
    """Exact per-trial outcome law of a station, dark counts excluded."""
    keep = config.switch.transmission * config.switch.routing * config.detectors.efficiency
    return thin(p_micro, keep)


# -- sampled station --------------------------------------------------------


def station_batch(config: StationConfig, micro: np.ndarray, t_emit: np.ndarray,
                  gen: np.random.Generator, period_ns: int = DEFAULT_PERIOD_NS) -> dict[str, np.ndarray]:
    """Vectorised station response for a block of trials.

    Returns arrays ``outcome`` (+1/-1/0), ``t_ns`` and ``dark``.
    """
    micro = np.asarray(micro, dtype=np.int8)
    t_emit = np.asarray(t_emit, dtype=np.int64)
    n = len(micro)
    survive = gen.random(n) < config.switch.transmission
    routed = gen.random(n) < config.switch.routing
    clicked = gen.random(n) < config.detectors.efficiency
    real = (micro != 0) & survive & routed & clicked
    jitter = np.rint(gen.normal(0.0, config.jitter_ns, n)) if config.jitter_ns > 0 else np.zeros(n)
    offset = np.clip(config.delay_ns + jitter, 0, period_ns - 1).astype(np.int64)
    t_real = t_emit + offset

    outcome = np.where(real, micro, 0).astype(np.int8)
    t_ns = t_real.copy()
    dark = np.zeros(n, dtype=bool)

    rate = config.detectors.dark_rate
    if rate > 0:
        # Detector 0 is "r" (+1), detector 1 is "g" (-1).  Only the first dark
        # count of each detector in the slot matters.
        k = gen.poisson(rate, (n, 2))
        u = gen.random((n, 2))
        with np.errstate(divide="ignore"):
            first = np.where(k > 0, np.floor(period_ns * (1.0 - u ** (1.0 / np.maximum(k, 1)))), np.inf)
        which = np.argmin(first, axis=1)
        t_dark = first[np.arange(n), which]
        has_dark = np.isfinite(t_dark)
        t_dark_abs = t_emit + np.where(has_dark, t_dark, 0).astype(np.int64)
        dark_wins = has_dark & (~real | (t_dark_abs < t_real))
        outcome = np.where(dark_wins, np.where(which == 0, 1, -1), outcome).astype(np.int8)
        t_ns = np.where(dark_wins, t_dark_abs, t_ns)
        dark = dark_wins
    return {"outcome": outcome, "t_ns": t_ns, "dark": dark}


def station_trial(config: StationConfig, micro_outcome: Outcome, label: Label,
                  gen: np.random.Generator, t_emit: int = 0, trial_id: int = 0,
                  period_ns: int = DEFAULT_PERIOD_NS) -> LocalEvent:
    """One trial through the station; NoDetect events are returned, not dropped."""
    res = station_batch(config, np.array([int(micro_outcome)]), np.array([t_emit]), gen, period_ns)
    return LocalEvent(trial_id, int(res["t_ns"][0]), Label(label),
                      Outcome(int(res["outcome"][0])), bool(res["dark"][0]))


def simulate_station_counts(config: StationConfig, p_micro, n: int, seed: int,
                            period_ns: int = DEFAULT_PERIOD_NS) -> np.ndarray:
    """Empirical (setting, outcome) counts, shape (2, 3), for i.i.d. micro outcomes."""
    p = _as_distribution(p_micro)
    gen = RngStream(seed).generator()
    labels = gen.integers(0, 2, n)
    micro = gen.choice(np.array([1, -1, 0], dtype=np.int8), size=n, p=p)
    res = station_batch(config, micro, np.arange(n, dtype=np.int64) * period_ns, gen, period_ns)
    out_idx = np.where(res["outcome"] == 1, 0, np.where(res["outcome"] == -1, 1, 2))
    counts = np.zeros((2, 3), dtype=np.int64)
    np.add.at(counts, (labels, out_idx), 1)
    return counts


# -- event logs --------------------------------------------------------------


@dataclass
class EventLog:
    """Append-only detection record of one station, stored column-wise."""

    station: Station
    header: dict
    trial: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    t_ns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    setting: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    outcome: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    dark: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return len(self.trial)

    def __iter__(self) -> Iterator[LocalEvent]:
        for i in range(len(self)):
            yield LocalEvent(int(self.trial[i]), int(self.t_ns[i]), Label(int(self.setting[i])),
                             Outcome(int(self.outcome[i])), bool(self.dark[i]))

    def validate(self) -> None:
        if np.any(np.diff(self.t_ns) < 0):
            raise LogFormatError(f"{self.station.value} log timestamps decrease")
        if len(np.unique(self.trial)) != len(self.trial):
            raise LogFormatError(f"{self.station.value} log repeats trial ids")
        if np.any(self.outcome == 0):
            raise LogFormatError(f"{self.station.value} log contains NoDetect records")

    def truncated(self, n: int) -> "EventLog":
        return EventLog(self.station, dict(self.header), self.trial[:n], self.t_ns[:n],
                        self.setting[:n], self.outcome[:n], self.dark[:n])

    def same_as(self, other: "EventLog") -> bool:
        return (self.station == other.station and self.header == other.header
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("trial", "t_ns", "setting", "outcome", "dark")))

    # NDJSON: one header line then one record per detection.
    def write(self, fh: IO[str]) -> None:
        fh.write(json.dumps(self.header, sort_keys=True) + "\n")
        labels = [Label(0).wire(self.station), Label(1).wire(self.station)]
        sym = {1: "r", -1: "g"}
        for tr, t, s, o, d in zip(self.trial.tolist(), self.t_ns.tolist(), self.setting.tolist(),
                                  self.outcome.tolist(), self.dark.tolist()):
            fh.write(f'{{"trial": {tr}, "t_ns": {t}, "setting": "{labels[s]}", '
                     f'"outcome": "{sym[o]}", "dark": {"true" if d else "false"}}}\n')

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            self.write(fh)

    @classmethod
    def read(cls, fh: IO[str]) -> "EventLog":
        lines = iter(fh)
        try:
            header = json.loads(next(lines))
        except StopIteration:
            raise LogFormatError("empty log, header line missing", 0) from None
        except json.JSONDecodeError as exc:
            raise LogFormatError(f"bad header: {exc}", 0) from None
        missing = {"station", "seed", "config_hash", "period_ns"} - set(header)
        if not isinstance(header, dict) or missing:
            raise LogFormatError(f"header lacks keys {sorted(missing)}", 0)
        try:
            station = Station(header["station"])
        except ValueError:
            raise LogFormatError(f"unknown station {header['station']!r}", 0) from None
        wire = {Label(0).wire(station): 0, Label(1).wire(station): 1}
        cols = ([], [], [], [], [])
        for rec_no, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cols[0].append(int(rec["trial"]))
                cols[1].append(int(rec["t_ns"]))
                cols[2].append(wire[rec["setting"]])
                cols[3].append({"r": 1, "g": -1}[rec["outcome"]])
                dark = rec["dark"]
                if not isinstance(dark, bool):
                    raise TypeError("dark must be a boolean")
                cols[4].append(dark)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise LogFormatError(f"malformed event ({type(exc).__name__}: {exc})", rec_no) from None
        log = cls(station, header,
                  np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                  np.array(cols[2], dtype=np.int8), np.array(cols[3], dtype=np.int8),
                  np.array(cols[4], dtype=bool))
        log.validate()
        return log

    @classmethod
    def load(cls, path) -> "EventLog":
        with open(path, encoding="utf-8") as fh:
            return cls.read(fh)


# -- experiment pipeline -----------------------------------------------------


@dataclass
class RunMetadata:
    """Ground truth a simulation knows and a real log does not."""

    n_trials: int
    seed: int
    period_ns: int
    scenario: str
    config_hash: str
    trials_per_pair: np.ndarray  # [alice label, bob label]

    @property
    def trials_per_setting(self) -> dict[Station, np.ndarray]:
        return {Station.ALICE: self.trials_per_pair.sum(axis=1),
                Station.BOB: self.trials_per_pair.sum(axis=0)}

    def to_dict(self) -> dict:
        return {
            "n_trials": self.n_trials,
            "seed": self.seed,
            "period_ns": self.period_ns,
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "trials_per_pair": self.trials_per_pair.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunMetadata":
        return cls(int(d["n_trials"]), int(d["seed"]), int(d["period_ns"]), d["scenario"],
                   d["config_hash"], np.asarray(d["trials_per_pair"], dtype=np.int64))


@dataclass
class ExperimentRun:
    alice: EventLog
    bob: EventLog
    metadata: RunMetadata

    def __iter__(self):
        return iter((self.alice, self.bob))


def experiment_hash(source, alice: StationConfig, bob: StationConfig, n_trials: int,
                    period_ns: int) -> str:
    doc = {"source": describe(source), "alice": alice.to_dict(), "bob": bob.to_dict(),
           "n_trials": n_trials, "period_ns": period_ns}
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("BELL_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _run_chunk(source, configs: dict[Station, StationConfig], root: RngStream, chunk: int,
               start: int, stop: int, period_ns: int) -> dict:
    n = stop - start
    labels, angles = {}, {}
    for st, cfg in configs.items():
        labels[st] = root.derive(ROLE_SETTING[st], chunk).generator().integers(0, 2, n).astype(np.int8)
        angles[st] = cfg.angles[labels[st]]
    src_gen = root.derive(ROLE_SOURCE, chunk).generator()
    if isinstance(source, QuantumSource):
        micro_a, micro_b = source.sample_joint(src_gen, angles[Station.ALICE], angles[Station.BOB])
        micro = {Station.ALICE: micro_a, Station.BOB: micro_b}
    else:
        if isinstance(source, SettingDependentSource):
            payload = source.sampler(src_gen, n, labels[Station.ALICE], angles[Station.ALICE],
                                     labels[Station.BOB], angles[Station.BOB])
        else:
            payload = source.sampler(src_gen, n)
        micro = {
            st: sample_responses(source.response_for(st), payload, labels[st], angles[st],
                                 root.derive(ROLE_RESPONSE[st], chunk).generator())
            for st in configs
        }
    t_emit = np.arange(start, stop, dtype=np.int64) * period_ns
    out = {"labels": labels}
    for st, cfg in configs.items():
        out[st] = station_batch(cfg, micro[st], t_emit,
                                root.derive(ROLE_STATION[st], chunk).generator(), period_ns)
    return out


def run_experiment(source, alice: StationConfig, bob: StationConfig, n_trials: int, seed: int, *,
                   period_ns: int = DEFAULT_PERIOD_NS, chunk_size: int = DEFAULT_CHUNK,
                   workers: int | None = None, config_hash: str | None = None) -> ExperimentRun:
    """Simulate ``n_trials`` emissions through both stations.

    Trials are generated in fixed-size chunks, each from its own derived
    streams, so the logs do not depend on the number of workers.
    """
    if n_trials < 1:
        raise ConfigurationError("n_trials must be >= 1")
    if alice.station is not Station.ALICE or bob.station is not Station.BOB:
        raise ConfigurationError("station configs are swapped")
    configs = {Station.ALICE: alice, Station.BOB: bob}
    root = RngStream(seed)
    bounds = [(c, s, min(s + chunk_size, n_trials)) for c, s in enumerate(range(0, n_trials, chunk_size))]
    workers = workers or worker_count()

    def job(b):
        return _run_chunk(source, configs, root, b[0], b[1], b[2], period_ns)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]

    scenario = SCENARIO_LOCALITY if isinstance(source, SettingDependentSource) else SCENARIO_STANDARD
    if config_hash is None:
        config_hash = experiment_hash(source, alice, bob, n_trials, period_ns)
    trials = np.arange(n_trials, dtype=np.int64)
    logs = {}
    label_cols = {}
    for st in configs:
        label_cols[st] = np.concatenate([p["labels"][st] for p in parts])
        outcome = np.concatenate([p[st]["outcome"] for p in parts])
        t_ns = np.concatenate([p[st]["t_ns"] for p in parts])
        dark = np.concatenate([p[st]["dark"] for p in parts])
        keep = outcome != 0
        header = {"station": st.value, "seed": int(seed), "config_hash": config_hash,
                  "period_ns": int(period_ns), "scenario": scenario}
        logs[st] = EventLog(st, header, trials[keep], t_ns[keep], label_cols[st][keep],
                            outcome[keep], dark[keep])
    per_pair = np.zeros((2, 2), dtype=np.int64)
    np.add.at(per_pair, (label_cols[Station.ALICE], label_cols[Station.BOB]), 1)
    meta = RunMetadata(n_trials, int(seed), int(period_ns), scenario, config_hash, per_pair)
    return ExperimentRun(logs[Station.ALICE], logs[Station.BOB], meta)


def ideal_stations(angles_deg: Sequence[float] = (0.0, 45.0, 22.5, -22.5), **kwargs) -> tuple[StationConfig, StationConfig]:
    """Lossless, dark-free stations at the given (a, a', b, b') angles in degrees."""
    a, a2, b, b2 = angles_deg
    return (StationConfig.make(Station.ALICE, a, a2, **kwargs),
            StationConfig.make(Station.BOB, b, b2, **kwargs))


def write_logs(run: ExperimentRun, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pa, pb = out / "alice.ndjson", out / "bob.ndjson"
    run.alice.save(pa)
    run.bob.save(pb)
    return pa, pb
