"""Offline analysis: coincidence pairing, correlation and CHSH estimation.

Two correlation estimators are available:

``conditional``
    normalise coincidence counts by the number of coincidences of the
    setting pair (fair sampling, what experiments report);
``all-trials``
    normalise by the number of emitted trials of the setting pair, so that
    undetected pairs count as zero.  Needs simulation metadata.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .apparatus import EventLog, RunMetadata
from .core import (
    BellLabError,
    CHSH_SIGNS,
    SETTING_PAIRS,
    SettingPair,
    Station,
    chsh_s,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ESTIMATORS = ("conditional", "all-trials")


class UndefinedCorrelationError(BellLabError):
    def __init__(self, pair: SettingPair):
        super().__init__(f"no coincidences for setting pair {pair.wire}; correlation undefined")
        self.pair = pair


class MetadataUnavailable(BellLabError):
    pass


class AmbiguousPairingWarning(UserWarning):
    pass


@dataclass
class CoincidenceTable:
    """Coincidence counts indexed ``[alice label, bob label, a index, b index]``.

    Outcome index 0 is +1 ("r"), index 1 is -1 ("g").
    """

    counts: np.ndarray
    singles: dict[Station, np.ndarray]
    trials: np.ndarray | None = None
    matched_trials: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    accidental: int = 0
    ambiguity_rate: float = 0.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, CoincidenceTable):
            return NotImplemented
        same_trials = (self.trials is None and other.trials is None) or (
            self.trials is not None and other.trials is not None
            and np.array_equal(self.trials, other.trials))
        return (np.array_equal(self.counts, other.counts) and same_trials
                and all(np.array_equal(self.singles[s], other.singles[s]) for s in Station)
                and np.array_equal(self.matched_trials, other.matched_trials))

    def pair_counts(self, pair: SettingPair) -> np.ndarray:
        return self.counts[int(pair.alice), int(pair.bob)]

    def total(self, pair: SettingPair) -> int:
        return int(self.pair_counts(pair).sum())


def _candidates(t_a: np.ndarray, t_b: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    lo = np.searchsorted(t_b, t_a - window, side="left")
    hi = np.searchsorted(t_b, t_a + window, side="right")
    deg = hi - lo
    ia = np.repeat(np.arange(len(t_a)), deg)
    starts = np.repeat(np.cumsum(deg) - deg, deg)
    ib = lo[ia] + (np.arange(len(ia)) - starts)
    return ia, ib


def pair_coincidences(log_a: EventLog, log_b: EventLog, window_ns: int, *,
                      metadata: RunMetadata | None = None,
                      ambiguity_warn: float = 0.01) -> CoincidenceTable:
    """Greedy nearest-timestamp pairing of two local logs.

    Candidate pairs satisfy ``|tA - tB| <= window_ns``; they are accepted in
    order of increasing time difference, then smaller tA, then smaller Alice
    trial id, each event being used at most once.
    """
    if window_ns < 0:
        raise ValueError("window_ns must be >= 0")
    t_a, t_b = log_a.t_ns, log_b.t_ns
    ia, ib = _candidates(t_a, t_b, window_ns)
    deg_a = np.bincount(ia, minlength=len(t_a))
    deg_b = np.bincount(ib, minlength=len(t_b))
    isolated = (deg_a[ia] == 1) & (deg_b[ib] == 1)

    accept = np.zeros(len(ia), dtype=bool)
    accept[isolated] = True
    rest = np.flatnonzero(~isolated)
    if len(rest):
        dt = np.abs(t_a[ia[rest]] - t_b[ib[rest]])
        order = np.lexsort((log_b.trial[ib[rest]], log_a.trial[ia[rest]], t_a[ia[rest]], dt))
        used_a, used_b = set(), set()
        for j in rest[order].tolist():
            a, b = int(ia[j]), int(ib[j])
            if a in used_a or b in used_b:
                continue
            used_a.add(a)
            used_b.add(b)
            accept[j] = True
    n_events = len(t_a) + len(t_b)
    ambiguity = (np.count_nonzero(deg_a > 1) + np.count_nonzero(deg_b > 1)) / n_events if n_events else 0.0
    if ambiguity > ambiguity_warn:
        warnings.warn(f"{ambiguity:.2%} of events have several pairing candidates", AmbiguousPairingWarning,
                      stacklevel=2)

    ma, mb = ia[accept], ib[accept]
    # restore Alice-time order for a canonical match list
    order = np.argsort(ma, kind="stable")
    ma, mb = ma[order], mb[order]
    counts = np.zeros((2, 2, 2, 2), dtype=np.int64)
    np.add.at(counts, (log_a.setting[ma], log_b.setting[mb],
                       (log_a.outcome[ma] == -1).astype(int), (log_b.outcome[mb] == -1).astype(int)), 1)
    singles = {
        Station.ALICE: np.bincount(log_a.setting, minlength=2).astype(np.int64),
        Station.BOB: np.bincount(log_b.setting, minlength=2).astype(np.int64),
    }
    return CoincidenceTable(
        counts=counts,
        singles=singles,
        trials=None if metadata is None else np.asarray(metadata.trials_per_pair, dtype=np.int64),
        matched_trials=np.stack([log_a.trial[ma], log_b.trial[mb]], axis=1),
        accidental=int(np.count_nonzero(log_a.dark[ma] | log_b.dark[mb])),
        ambiguity_rate=float(ambiguity),
    )


def correlation(table: CoincidenceTable, pair: SettingPair,
                estimator: str = "conditional") -> tuple[float, float]:
    """Correlation estimate and its standard error for one setting pair."""
    c = table.pair_counts(pair)
    n_tot = int(c.sum())
    if n_tot == 0:
        raise UndefinedCorrelationError(pair)
    agree = int(c[0, 0] + c[1, 1])
    disagree = int(c[0, 1] + c[1, 0])
    if estimator == "conditional":
        e = (agree - disagree) / n_tot
        return e, math.sqrt(max(0.0, 1.0 - e * e) / n_tot)
    if estimator == "all-trials":
        if table.trials is None:
            raise MetadataUnavailable("the all-trials estimator needs per-pair trial counts")
        n = int(table.trials[int(pair.alice), int(pair.bob)])
        e = (agree - disagree) / n
        # per-trial score is +1, -1 or 0 (no coincidence)
        return e, math.sqrt(max(0.0, n_tot / n - e * e) / n)
    raise ValueError(f"unknown estimator {estimator!r}")


@dataclass
class ChshResult:
    e: dict[SettingPair, float]
    stderr_e: dict[SettingPair, float]
    s: float
    stderr_s: float
    k: float = 3.0
    estimator: str = "conditional"

    @property
    def violates(self) -> bool:
        return self.s - 2.0 > self.k * self.stderr_s


def chsh(table: CoincidenceTable, k: float = 3.0, estimator: str = "conditional") -> ChshResult:
    e, err = {}, {}
    for pair in SETTING_PAIRS:
        e[pair], err[pair] = correlation(table, pair, estimator)
    s = chsh_s(e)
    stderr = math.sqrt(sum(v * v for v in err.values()))
    return ChshResult(e, err, s, stderr, k, estimator)


def efficiency_estimate(table: CoincidenceTable,
                        metadata: RunMetadata | None) -> dict[Station, np.ndarray]:
    """Detected singles over emitted trials, per station and setting label."""
    if metadata is None:
        raise MetadataUnavailable("efficiency needs emitted-trial counts, which a real log does not carry")
    emitted = metadata.trials_per_setting
    return {st: table.singles[st] / np.maximum(emitted[st], 1) for st in Station}


def station_distribution(log: EventLog, emitted_per_setting: np.ndarray) -> np.ndarray:
    """(setting, outcome) counts, shape (2, 3), with NoDetect filled in from trial counts."""
    counts = np.zeros((2, 3), dtype=np.int64)
    np.add.at(counts, (log.setting, (log.outcome == -1).astype(int)), 1)
    counts[:, 2] = np.asarray(emitted_per_setting) - counts[:, :2].sum(axis=1)
    if np.any(counts[:, 2] < 0):
        raise ValueError("more detections than emitted trials")
    return counts


class StationComparison(NamedTuple):
    tv_distance: float
    consistent: bool
    bound: float
    conclusive: bool


def compare_stations(dist_1, dist_2) -> StationComparison:
    """Two-sample total-variation test between empirical count tables.

    Distributions are taken as consistent when TV <= 5 sqrt(cells / N) with N
    the smaller sample size.  When that bound reaches 1 no difference could
    ever be detected and the result is marked inconclusive.
    """
    if isinstance(dist_1, Mapping) or isinstance(dist_2, Mapping):
        if not (isinstance(dist_1, Mapping) and isinstance(dist_2, Mapping)) or set(dist_1) != set(dist_2):
            raise ValueError("distributions have different outcome cells")
        keys = sorted(dist_1, key=repr)
        dist_1 = [dist_1[k] for k in keys]
        dist_2 = [dist_2[k] for k in keys]
    c1 = np.asarray(dist_1, dtype=float)
    c2 = np.asarray(dist_2, dtype=float)
    if c1.shape != c2.shape:
        raise ValueError(f"cell structure mismatch: {c1.shape} vs {c2.shape}")
    n1, n2 = c1.sum(), c2.sum()
    if n1 <= 0 or n2 <= 0:
        raise ValueError("empty distribution")
    tv = 0.5 * float(np.abs(c1 / n1 - c2 / n2).sum())
    bound = 5.0 * math.sqrt(c1.size / min(n1, n2))
    return StationComparison(tv, bool(tv <= bound), bound, bool(bound < 1.0))


def estimate_dark_rate(log: EventLog, n_trials: int, detectors: int = 2) -> tuple[float, float]:
    """Per-detector dark-count rate per trial slot from dark-flagged records.

    Exact when no real detections compete for the slot; otherwise real clicks
    that precede a dark count hide it and the estimate is biased low.
    """
    f = np.count_nonzero(log.dark) / n_trials
    if f >= 1.0:
        return math.inf, math.inf
    rate = -math.log1p(-f) / detectors
    stderr = math.sqrt(f * (1.0 - f) / n_trials) / ((1.0 - f) * detectors)
    return rate, stderr


# -- reports --------------------------------------------------------------

_CELL_KEYS = ("++", "+-", "-+", "--")


def results_document(table: CoincidenceTable, result: ChshResult | None, *,
                     efficiency: dict[Station, np.ndarray] | None = None,
                     extra: dict | None = None) -> dict:
    pairs = []
    for pair in SETTING_PAIRS:
        c = table.pair_counts(pair).ravel().tolist()
        row = {"pair": pair.wire, "sign": CHSH_SIGNS[pair],
               "counts": dict(zip(_CELL_KEYS, c)), "coincidences": int(sum(c))}
        if table.trials is not None:
            row["trials"] = int(table.trials[int(pair.alice), int(pair.bob)])
        if result is not None:
            row["e"] = result.e[pair]
            row["stderr"] = result.stderr_e[pair]
        pairs.append(row)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "pairs": pairs,
        "singles": {st.value: table.singles[st].tolist() for st in Station},
        "coincidences_total": int(table.counts.sum()),
        "accidental_coincidences": table.accidental,
        "ambiguity_rate": table.ambiguity_rate,
    }
    if result is not None:
        doc.update({"estimator": result.estimator, "s": result.s, "stderr_s": result.stderr_s,
                    "k": result.k, "violates": result.violates})
    if efficiency is not None:
        doc["efficiency"] = {st.value: v.tolist() for st, v in efficiency.items()}
    if extra:
        doc.update(extra)
    return doc


def write_results_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_pairs_csv(path, table: CoincidenceTable, result: ChshResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "n_pp", "n_pm", "n_mp", "n_mm", "coincidences", "e", "stderr"])
        for pair in SETTING_PAIRS:
            c = table.pair_counts(pair).ravel().tolist()
            w.writerow([pair.wire, *c, sum(c), repr(result.e[pair]), repr(result.stderr_e[pair])])
