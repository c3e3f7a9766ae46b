"""CHSH Bell-test simulation and analysis with explicit local-model adversaries."""

from .analysis import ChshResult, CoincidenceTable, chsh, compare_stations, correlation, pair_coincidences
from .apparatus import EventLog, StationConfig, SwitchKind, DetectorConfig, ideal_stations, run_experiment
from .core import Angle, Label, Outcome, RngStream, Setting, SettingPair, Station, chsh_s, quantum_correlation
from .lhvopt import critical_efficiency, max_chsh_at_efficiency, realize_adversary
from .sources import QuantumSource, make_gg_adversary, make_locality_adversary, make_source

__version__ = "0.1.0"
