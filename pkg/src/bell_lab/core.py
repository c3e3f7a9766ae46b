"""Shared domain types, angle and RNG conventions, and CHSH arithmetic.

Conventions used throughout the package:

* Angles are analyser orientations in radians, normalised to ``[0, pi)``.
  Everything user facing (configs, CLI flags) speaks degrees.
* Setting labels on the wire are ``"a"``/``"a2"`` for Alice and ``"b"``/``"b2"``
  for Bob; outcomes are ``"r"`` (+1) and ``"g"`` (-1).
* Random numbers come from numpy's ``Philox`` counter-based generator keyed
  through ``SeedSequence(seed, spawn_key=(stream_id,))``.  A stream is fully
  determined by ``(seed, stream_id)`` so a chunk of trials can be regenerated
  on any worker without replaying earlier chunks.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

__all__ = [
    "Angle",
    "BellLabError",
    "ConfigurationError",
    "CorrelationSet",
    "Label",
    "ModelDefinitionError",
    "Outcome",
    "RngStream",
    "SETTING_PAIRS",
    "CHSH_SIGNS",
    "Setting",
    "SettingPair",
    "Station",
    "chsh_optimal_settings",
    "chsh_s",
    "quantum_correlation",
]


class BellLabError(Exception):
    """Base class for package errors."""


class ConfigurationError(BellLabError):
    pass


class ModelDefinitionError(BellLabError):
    """A source produced response probabilities outside the simplex."""


class Station(str, enum.Enum):
    ALICE = "alice"
    BOB = "bob"


class Label(enum.IntEnum):
    PRIMARY = 0
    ALTERNATE = 1

    def wire(self, station: Station) -> str:
        base = "a" if station is Station.ALICE else "b"
        return base if self is Label.PRIMARY else base + "2"

    @classmethod
    def from_wire(cls, text: str) -> tuple[Station, "Label"]:
        try:
            return _WIRE_LABELS[text]
        except KeyError:
            raise ConfigurationError(f"unknown setting label {text!r}") from None


_WIRE_LABELS = {
    "a": (Station.ALICE, Label.PRIMARY),
    "a2": (Station.ALICE, Label.ALTERNATE),
    "b": (Station.BOB, Label.PRIMARY),
    "b2": (Station.BOB, Label.ALTERNATE),
}


class Outcome(enum.IntEnum):
    """Station outcome; the integer value is the arithmetic value (0 = absent)."""

    PLUS = 1
    MINUS = -1
    NO_DETECT = 0

    @property
    def symbol(self) -> str:
        return {1: "r", -1: "g", 0: "none"}[int(self)]

    @classmethod
    def from_symbol(cls, symbol: str) -> "Outcome":
        try:
            return {"r": cls.PLUS, "g": cls.MINUS, "none": cls.NO_DETECT}[symbol]
        except KeyError:
            raise ConfigurationError(f"unknown outcome symbol {symbol!r}") from None


@dataclass(frozen=True)
class Angle:
    """Analyser angle in radians, reduced mod pi."""

    value: float

    def __post_init__(self):
        v = float(self.value) % math.pi
        # tiny negative inputs round up to exactly pi
        object.__setattr__(self, "value", 0.0 if v >= math.pi else v)

    @classmethod
    def from_degrees(cls, degrees: float) -> "Angle":
        return cls(math.radians(degrees))

    @property
    def degrees(self) -> float:
        return math.degrees(self.value)


@dataclass(frozen=True)
class Setting:
    station: Station
    label: Label
    angle: Angle

    @property
    def wire(self) -> str:
        return self.label.wire(self.station)


class SettingPair(NamedTuple):
    alice: Label
    bob: Label

    @property
    def wire(self) -> str:
        return f"{self.alice.wire(Station.ALICE)},{self.bob.wire(Station.BOB)}"


SETTING_PAIRS: tuple[SettingPair, ...] = (
    SettingPair(Label.PRIMARY, Label.PRIMARY),
    SettingPair(Label.PRIMARY, Label.ALTERNATE),
    SettingPair(Label.ALTERNATE, Label.PRIMARY),
    SettingPair(Label.ALTERNATE, Label.ALTERNATE),
)

# Sign of each correlation in S = E(a,b) + E(a,b') + E(a',b) - E(a',b').
CHSH_SIGNS: dict[SettingPair, int] = dict(zip(SETTING_PAIRS, (1, 1, 1, -1)))

CorrelationSet = Mapping[SettingPair, float]


def chsh_s(corr: CorrelationSet) -> float:
    """Combine four correlations into the CHSH quantity S."""
    missing = [p.wire for p in SETTING_PAIRS if p not in corr]
    if missing:
        raise ConfigurationError(f"correlation set is missing pairs: {', '.join(missing)}")
    for pair in SETTING_PAIRS:
        e = corr[pair]
        if not -1.0 <= e <= 1.0:
            raise ConfigurationError(f"correlation {pair.wire} = {e} lies outside [-1, 1]")
    return sum(CHSH_SIGNS[p] * corr[p] for p in SETTING_PAIRS)


def quantum_correlation(alice_angle: Angle, bob_angle: Angle) -> float:
    """Ideal polarisation correlation cos 2(alpha - beta) for a phi+ pair."""
    return math.cos(2.0 * (alice_angle.value - bob_angle.value))


def chsh_optimal_settings() -> tuple[Angle, Angle, Angle, Angle]:
    """Return (alpha, alpha', beta, beta') reaching S = 2*sqrt(2)."""
    return (
        Angle.from_degrees(0.0),
        Angle.from_degrees(45.0),
        Angle.from_degrees(22.5),
        Angle.from_degrees(-22.5),
    )


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Each call to :meth:`generator` returns a fresh generator positioned at
    draw index 0, so the same stream can be replayed anywhere.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= v < 2**64:
                raise ConfigurationError(f"{name} must fit in an unsigned 64-bit integer, got {v}")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(seq))

    def derive(self, role: int, index: int = 0) -> "RngStream":
        """Sub-stream for a role (e.g. Alice's setting choice) and chunk index."""
        return RngStream(self.seed, (role << 40) | (index & ((1 << 40) - 1)))
