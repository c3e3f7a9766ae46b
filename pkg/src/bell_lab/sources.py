"""Pair sources: the quantum reference sampler and local hidden-variable models.

Every local source is a triple ``(sampler, alice_response, bob_response)``.
The sampler draws a batch of hidden states; a response maps
``(payload, labels, angles)`` of *one* station to per-trial probabilities
``(p_plus, p_minus)``.  Responses never see the other station's setting, so
the joint law factorises given the hidden state.

All callables are vectorised over trials: ``payload`` has the trial axis
first, ``labels`` holds setting labels (0 primary, 1 alternate) and
``angles`` the analyser angles in radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .core import (
    Label,
    ModelDefinitionError,
    Outcome,
    Setting,
    Station,
)
from .strategies import (
    ALICE_TABLE,
    ALL_PLUS_INDEX,
    BOB_TABLE,
    FULL_DETECTION_INDICES,
    STRATEGIES,
    strategy_index,
)

Response = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]

_PROB_TOL = 1e-12


@dataclass(frozen=True)
class HiddenSample:
    payload: Any
    trial_id: int = 0


@dataclass(frozen=True)
class QuantumSource:
    """Nonlocal reference sampler for the ideal quantum prediction.

    Not a local model: Bob's outcome is drawn conditionally on Alice's.
    """

    name: str = "quantum"
    params: dict = field(default_factory=dict)

    def sample_joint(self, gen: np.random.Generator, alice_angles: np.ndarray,
                     bob_angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = len(alice_angles)
        a = np.where(gen.random(n) < 0.5, 1, -1).astype(np.int8)
        p_same = 0.5 * (1.0 + np.cos(2.0 * (np.asarray(alice_angles) - np.asarray(bob_angles))))
        b = np.where(gen.random(n) < p_same, a, -a).astype(np.int8)
        return a, b


@dataclass(frozen=True)
class LhvSource:
    name: str
    sampler: Callable[[np.random.Generator, int], Any]
    alice_response: Response
    bob_response: Response
    params: dict = field(default_factory=dict)

    def response_for(self, station: Station) -> Response:
        return self.alice_response if station is Station.ALICE else self.bob_response


@dataclass(frozen=True)
class SettingDependentSource:
    """Source whose hidden-state law depends on both settings.

    Only meaningful in locality-loophole scenarios: the sampler is handed
    ``(gen, n, alice_labels, alice_angles, bob_labels, bob_angles)``.
    """

    name: str
    sampler: Callable[..., Any]
    alice_response: Response
    bob_response: Response
    params: dict = field(default_factory=dict)
    violates_setting_independence: bool = True

    def response_for(self, station: Station) -> Response:
        return self.alice_response if station is Station.ALICE else self.bob_response


def describe(source) -> dict:
    return {"name": source.name, "params": dict(source.params)}


def response_probabilities(response: Response, payload, labels, angles) -> tuple[np.ndarray, np.ndarray]:
    p_plus, p_minus = response(payload, np.asarray(labels), np.asarray(angles, dtype=float))
    p_plus = np.broadcast_to(np.asarray(p_plus, dtype=float), np.shape(labels))
    p_minus = np.broadcast_to(np.asarray(p_minus, dtype=float), np.shape(labels))
    if (np.any(p_plus < -_PROB_TOL) or np.any(p_minus < -_PROB_TOL)
            or np.any(p_plus + p_minus > 1.0 + _PROB_TOL)):
        raise ModelDefinitionError("local response probabilities violate p+ >= 0, p- >= 0, p+ + p- <= 1")
    return p_plus, p_minus


def sample_responses(response: Response, payload, labels, angles,
                     gen: np.random.Generator) -> np.ndarray:
    """Draw outcomes (+1, -1, 0) for one station from its local response."""
    p_plus, p_minus = response_probabilities(response, payload, labels, angles)
    u = gen.random(len(p_plus))
    return np.where(u < p_plus, 1, np.where(u < p_plus + p_minus, -1, 0)).astype(np.int8)


# -- scalar operations -----------------------------------------------------


def quantum_sample_joint(alice: Setting, bob: Setting,
                         gen: np.random.Generator) -> tuple[Outcome, Outcome]:
    a, b = QuantumSource().sample_joint(gen, np.array([alice.angle.value]), np.array([bob.angle.value]))
    return Outcome(int(a[0])), Outcome(int(b[0]))


def sample_hidden(source: LhvSource, gen: np.random.Generator, trial_id: int = 0) -> HiddenSample:
    return HiddenSample(source.sampler(gen, 1), trial_id)


def lhv_respond(source, hidden: HiddenSample, setting: Setting,
                gen: np.random.Generator) -> Outcome:
    """Outcome of ``setting.station`` for one hidden state, using only its own setting."""
    response = source.response_for(setting.station)
    out = sample_responses(response, hidden.payload, np.array([int(setting.label)]),
                           np.array([setting.angle.value]), gen)
    return Outcome(int(out[0]))


# -- model constructors ----------------------------------------------------


def _sign(x: np.ndarray) -> np.ndarray:
    # sign(0) = +1
    return np.where(x >= 0, 1, -1)


def make_gg_adversary() -> LhvSource:
    """Polarisation model with a one-sided detection deficit.

    lambda is an angle uniform on [0, pi).  Alice always answers
    sign cos 2(alpha - lambda); Bob answers sign cos 2(beta - lambda) but only
    detects with probability |cos 2(beta - lambda)|.  Conditioned on
    coincidences the correlation is exactly cos 2(alpha - beta).
    """

    def sampler(gen, n):
        return gen.uniform(0.0, math.pi, n)

    def alice(theta, labels, angles):
        plus = (_sign(np.cos(2.0 * (angles - theta))) > 0).astype(float)
        return plus, 1.0 - plus

    def bob(theta, labels, angles):
        c = np.cos(2.0 * (angles - theta))
        detect = np.abs(c)
        plus = c >= 0
        return detect * plus, detect * ~plus

    return LhvSource("gg-adversary", sampler, alice, bob)


def make_locality_adversary() -> SettingDependentSource:
    """Source that knows both settings and pre-assigns quantum-distributed outcomes."""
    quantum = QuantumSource()

    def sampler(gen, n, alice_labels, alice_angles, bob_labels, bob_angles):
        a, b = quantum.sample_joint(gen, alice_angles, bob_angles)
        return np.stack([a, b], axis=1)

    def alice(payload, labels, angles):
        plus = (payload[:, 0] == 1).astype(float)
        return plus, 1.0 - plus

    def bob(payload, labels, angles):
        plus = (payload[:, 1] == 1).astype(float)
        return plus, 1.0 - plus

    return SettingDependentSource("locality-adversary", sampler, alice, bob)


def strategy_mixture_source(weights: Sequence[float], name: str = "strategy-mixture") -> LhvSource:
    """Local source whose hidden state is an index into the 81 deterministic strategies."""
    w = np.asarray([float(x) for x in weights], dtype=float)
    if w.shape != (len(STRATEGIES),):
        raise ModelDefinitionError(f"expected {len(STRATEGIES)} weights, got {w.shape}")
    if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
        raise ModelDefinitionError("mixture weights must lie on the probability simplex")
    w = np.clip(w, 0.0, None)
    cdf = np.cumsum(w / w.sum())
    cdf[-1] = 1.0

    def sampler(gen, n):
        return np.minimum(np.searchsorted(cdf, gen.random(n), side="right"), len(cdf) - 1)

    def table_response(table):
        def respond(k, labels, angles):
            r = table[k, labels]
            return (r == 1).astype(float), (r == -1).astype(float)
        return respond

    support = {int(i): float(w[i]) for i in np.flatnonzero(w)}
    return LhvSource(name, sampler, table_response(ALICE_TABLE), table_response(BOB_TABLE),
                     params={"weights": support})


GUESS_TABLE = {(0, 0): 1, (0, 1): 1, (1, 0): 1, (1, 1): -1}


def guess_mixture_weights(w: float) -> np.ndarray:
    """81-strategy weights of the guessing adversary.

    With probability ``w`` both sides hold a uniformly guessed setting and only
    answer when the actual setting matches; the answers multiply to the CHSH
    sign of the guessed pair, with a fair global sign flip.  Otherwise all
    detections answer +1.
    """
    if not 0.0 <= w <= 1.0:
        raise ModelDefinitionError(f"guess probability must lie in [0, 1], got {w}")
    weights = np.zeros(len(STRATEGIES))
    weights[ALL_PLUS_INDEX] += 1.0 - w
    for (x, y), sign in GUESS_TABLE.items():
        for flip in (1, -1):
            a_map = [0, 0]
            b_map = [0, 0]
            a_map[x] = flip
            b_map[y] = flip * sign
            weights[strategy_index(a_map, b_map)] += w / 8.0
    return weights


def make_guess_mixture_adversary(w: float) -> LhvSource:
    src = strategy_mixture_source(guess_mixture_weights(w), name="guess-mixture")
    return LhvSource(src.name, src.sampler, src.alice_response, src.bob_response, params={"w": float(w)})


def guess_mixture_chsh(w: float) -> float:
    """Closed-form conditional S of the guessing adversary."""
    return (2.0 - w) / (1.0 - 0.75 * w)


def random_lhv_strategy(gen: np.random.Generator) -> LhvSource:
    """Random full-detection mixture over deterministic strategies."""
    k = int(gen.integers(1, len(FULL_DETECTION_INDICES) + 1))
    support = gen.choice(FULL_DETECTION_INDICES, size=k, replace=False)
    weights = np.zeros(len(STRATEGIES))
    weights[support] = gen.dirichlet(np.ones(k))
    weights /= weights.sum()
    return strategy_mixture_source(weights, name="random-lhv")


def make_source(kind: str, **params):
    """Build a source from a config ``kind`` and its parameters."""
    if kind == "quantum":
        return QuantumSource()
    if kind == "gg":
        return make_gg_adversary()
    if kind == "locality":
        return make_locality_adversary()
    if kind == "guess-mixture":
        return make_guess_mixture_adversary(params.get("w", 1.0))
    if kind == "mixture":
        return strategy_mixture_source(params["weights"])
    if kind == "random-lhv":
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(params.get("seed", 0))))
        return random_lhv_strategy(gen)
    raise ModelDefinitionError(f"unknown source kind {kind!r}")


__all__ = [
    "HiddenSample",
    "LhvSource",
    "QuantumSource",
    "SettingDependentSource",
    "guess_mixture_chsh",
    "guess_mixture_weights",
    "lhv_respond",
    "make_gg_adversary",
    "make_guess_mixture_adversary",
    "make_locality_adversary",
    "make_source",
    "quantum_sample_joint",
    "random_lhv_strategy",
    "sample_hidden",
    "strategy_mixture_source",
]
