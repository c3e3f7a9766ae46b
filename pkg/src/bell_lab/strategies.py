"""Deterministic local strategies with a no-detection option.

A side's map sends each of its two setting labels to +1, -1 or 0 (no
detection), giving 9 maps per side and 81 joint strategies.  Ordering is
canonical: a side map is the tuple ``(response_primary, response_alternate)``
enumerated lexicographically over ``(+1, -1, 0)``, and the joint index is
``9 * alice_index + bob_index``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

RESPONSE_VALUES = (1, -1, 0)

SIDE_MAPS: tuple[tuple[int, int], ...] = tuple(itertools.product(RESPONSE_VALUES, repeat=2))


@dataclass(frozen=True)
class DeterministicStrategy:
    alice_map: tuple[int, int]
    bob_map: tuple[int, int]

    @property
    def index(self) -> int:
        return 9 * SIDE_MAPS.index(self.alice_map) + SIDE_MAPS.index(self.bob_map)

    @property
    def full_detection(self) -> bool:
        return 0 not in self.alice_map and 0 not in self.bob_map


def enumerate_strategies() -> list[DeterministicStrategy]:
    return [DeterministicStrategy(a, b) for a in SIDE_MAPS for b in SIDE_MAPS]


STRATEGIES: tuple[DeterministicStrategy, ...] = tuple(enumerate_strategies())

# ALICE_TABLE[k, x] is Alice's response in strategy k at setting label x.
ALICE_TABLE = np.array([s.alice_map for s in STRATEGIES], dtype=np.int8)
BOB_TABLE = np.array([s.bob_map for s in STRATEGIES], dtype=np.int8)

FULL_DETECTION_INDICES = np.array([s.index for s in STRATEGIES if s.full_detection])
ALL_PLUS_INDEX = DeterministicStrategy((1, 1), (1, 1)).index


def strategy_index(alice_map, bob_map) -> int:
    return DeterministicStrategy(tuple(alice_map), tuple(bob_map)).index
