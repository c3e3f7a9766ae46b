"""Maximum conditional CHSH value of local strategies at a given detection efficiency.

Two independent routes are provided:

* ``lp``: force the four coincidence probabilities to a common value ``d``,
  which turns the sum of ratios into a single linear-fractional objective.
  The substitution ``y = q / d``, ``t = 1 / d`` (Charnes-Cooper) then yields a
  linear program solved with HiGHS.
* ``fallback``: multistart projected-gradient ascent on the unrestricted sum
  of ratios over the 81-strategy simplex.  Projection onto the feasible
  polytope is done exactly by a semismooth Newton iteration on its dual.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .core import BellLabError
from .strategies import (
    ALICE_TABLE,
    BOB_TABLE,
    DeterministicStrategy,
    STRATEGIES,
    enumerate_strategies,
)

log = logging.getLogger(__name__)

__all__ = [
    "DeterministicStrategy",
    "InfeasibleEfficiencyError",
    "OptimizationResult",
    "conditional_chsh",
    "critical_efficiency",
    "enumerate_strategies",
    "max_chsh_at_efficiency",
    "realize_adversary",
    "scan_efficiency",
]

QUANTUM_S = 2.0 * math.sqrt(2.0)
AGREEMENT_TOL = 1e-3
SIMPLEX_TOL = 1e-12
# "independent": each side detects with probability eta at each setting and
# both detect with probability eta**2 at each setting pair, i.e. the model
# must mimic two independent detectors of efficiency eta.
# "marginal": only the four single-side detection probabilities are pinned.
CONSTRAINT_SCOPES = ("independent", "marginal")

_PAIRS = ((0, 0), (0, 1), (1, 0), (1, 1))
_SIGNS = np.array([1.0, 1.0, 1.0, -1.0])

# Column p of PRODUCT holds a*b for pair p (zero unless both sides detect);
# column p of BOTH is the joint detection indicator.
PRODUCT = np.stack([ALICE_TABLE[:, x] * BOB_TABLE[:, y] for x, y in _PAIRS], axis=1).astype(float)
BOTH = np.stack([(ALICE_TABLE[:, x] != 0) & (BOB_TABLE[:, y] != 0) for x, y in _PAIRS], axis=1).astype(float)
# Rows: Alice primary, Alice alternate, Bob primary, Bob alternate.
DETECT = np.concatenate([(ALICE_TABLE != 0).T, (BOB_TABLE != 0).T]).astype(float)
CHSH_NUMERATOR = PRODUCT @ _SIGNS


class InfeasibleEfficiencyError(BellLabError):
    pass


def _check_simplex(weights: Sequence) -> None:
    if len(weights) != len(STRATEGIES):
        raise ValueError(f"expected {len(STRATEGIES)} weights, got {len(weights)}")
    exact = all(isinstance(w, (int, Fraction)) for w in weights)
    tol = 0 if exact else SIMPLEX_TOL
    if any(w < -tol for w in weights) or abs(sum(weights) - 1) > tol:
        raise ValueError("weights are not a point of the probability simplex")


def conditional_chsh(weights: Sequence):
    """Coincidence-conditioned S of a strategy mixture, or ``None`` if undefined.

    Uses plain Python arithmetic, so ``Fraction`` weights give an exact result.
    """
    _check_simplex(weights)
    num = [0] * 4
    den = [0] * 4
    for k, w in enumerate(weights):
        if not w:
            continue
        for p in range(4):
            if BOTH[k, p]:
                den[p] += w
                num[p] += w * int(PRODUCT[k, p])
    if any(d == 0 for d in den):
        return None
    ratios = [n / d for n, d in zip(num, den)]
    return ratios[0] + ratios[1] + ratios[2] - ratios[3]


def _chsh_and_grad(q: np.ndarray) -> tuple[float, np.ndarray]:
    n = q @ PRODUCT
    d = q @ BOTH
    if np.any(d <= 1e-300):
        return -math.inf, np.zeros_like(q)
    s = float(_SIGNS @ (n / d))
    grad = PRODUCT @ (_SIGNS / d) - BOTH @ (_SIGNS * n / d**2)
    return s, grad


@dataclass
class OptimizationResult:
    eta: float
    s_max: float
    argmax: np.ndarray
    s_lp: float | None
    s_fallback: float | None
    lp_weights: np.ndarray | None = None
    fallback_weights: np.ndarray | None = None

    @property
    def gap(self) -> float | None:
        if self.s_lp is None or self.s_fallback is None:
            return None
        return self.s_fallback - self.s_lp

    @property
    def flagged(self) -> bool:
        return self.gap is not None and abs(self.gap) > AGREEMENT_TOL


def _validate_scope(constraint: str) -> None:
    if constraint not in CONSTRAINT_SCOPES:
        raise ValueError(f"unknown constraint scope {constraint!r}; expected one of {CONSTRAINT_SCOPES}")


def _validate_eta(eta: float) -> float:
    eta = float(eta)
    if not 0.0 < eta <= 1.0:
        raise InfeasibleEfficiencyError(f"efficiency must lie in (0, 1], got {eta}")
    return eta


def solve_lp(eta: float, constraint: str = "independent",
             inequality: bool = False) -> tuple[float, np.ndarray]:
    """Equal-denominator linear program; returns (S, mixture weights)."""
    eta = _validate_eta(eta)
    _validate_scope(constraint)
    n = len(STRATEGIES)
    # Variables: y (n entries) and t = 1/d.  Objective: maximise CHSH_NUMERATOR . y.
    c = np.concatenate([-CHSH_NUMERATOR, [0.0]])
    a_eq = [np.concatenate([BOTH[:, p], [0.0]]) for p in range(4)]
    b_eq = [1.0] * 4
    a_eq.append(np.concatenate([np.ones(n), [-1.0]]))
    b_eq.append(0.0)
    a_ub, b_ub = [], []
    singles = np.hstack([DETECT, -eta * np.ones((4, 1))])
    if inequality:
        a_ub.extend(-singles)
        b_ub.extend([0.0] * 4)
    else:
        a_eq.extend(singles)
        b_eq.extend([0.0] * 4)
    if constraint == "independent":
        # common coincidence probability d = 1/t pinned to (or above) eta**2
        row = np.concatenate([np.zeros(n), [eta**2]])
        (a_ub if inequality else a_eq).append(row)
        (b_ub if inequality else b_eq).append(1.0)
    res = linprog(c, A_ub=np.array(a_ub) if a_ub else None, b_ub=b_ub or None,
                  A_eq=np.array(a_eq), b_eq=np.array(b_eq),
                  bounds=[(0, None)] * (n + 1), method="highs")
    if res.status != 0:
        raise InfeasibleEfficiencyError(f"LP failed at eta={eta}: {res.message}")
    y, t = res.x[:n], res.x[n]
    q = np.clip(y / t, 0.0, None)
    q /= q.sum()
    return float(-res.fun), q


def _project(z: np.ndarray, a: np.ndarray, b: np.ndarray, iters: int = 100) -> np.ndarray:
    """Euclidean projection of z onto {x >= 0, a x = b}."""
    m = a.shape[0]
    mu = np.zeros(m)

    def dual(mu):
        xp = np.maximum(z - a.T @ mu, 0.0)
        return 0.5 * xp @ xp + b @ mu, xp

    phi, xp = dual(mu)
    for _ in range(iters):
        g = b - a @ xp
        if np.max(np.abs(g)) < 1e-14:
            break
        act = xp > 0
        h = a[:, act] @ a[:, act].T + 1e-12 * np.eye(m)
        step = np.linalg.solve(h, -g)
        t = 1.0
        while True:
            phi_new, xp_new = dual(mu + t * step)
            if phi_new <= phi + 1e-4 * t * (g @ step) or t < 1e-12:
                break
            t *= 0.5
        mu, phi, xp = mu + t * step, phi_new, xp_new
    # polish: minimum-norm correction on the support removes the residual left by the dual
    act = xp > 0
    if act.any():
        r = b - a @ xp
        corr = np.linalg.lstsq(a[:, act], r, rcond=None)[0]
        fixed = xp.copy()
        fixed[act] += corr
        if fixed.min() >= 0 and np.abs(b - a @ fixed).max() < np.abs(r).max():
            xp = fixed
    return xp


def _fallback_constraints(eta: float, constraint: str,
                          inequality: bool) -> tuple[np.ndarray, np.ndarray, int]:
    n = len(STRATEGIES)
    rows, rhs = [DETECT], [eta] * 4
    if constraint == "independent":
        rows.append(BOTH.T)
        rhs.extend([eta**2] * 4)
    lower = np.vstack(rows)
    if inequality:
        # slacks s >= 0 with lower q - s = rhs
        k = lower.shape[0]
        a = np.vstack([
            np.concatenate([np.ones(n), np.zeros(k)]),
            np.hstack([lower, -np.eye(k)]),
        ])
    else:
        a = np.vstack([np.ones(n), lower])
    return a, np.array([1.0] + rhs), n


def _ascend(v: np.ndarray, a, b, n: int, max_iter: int) -> tuple[float, np.ndarray]:
    s, g = _chsh_and_grad(v[:n])
    step = 1e-2
    for _ in range(max_iter):
        full_g = np.zeros_like(v)
        full_g[:n] = g
        while True:
            cand = _project(v + step * full_g, a, b)
            s_new, g_new = _chsh_and_grad(cand[:n])
            if s_new >= s + 1e-4 * full_g @ (cand - v):
                break
            step *= 0.5
            if step < 1e-16:
                return s, v
        moved = np.max(np.abs(cand - v))
        gain = s_new - s
        v, s, g = cand, s_new, g_new
        step *= 2.0
        if moved < 1e-13 or 0 <= gain < 1e-13:
            break
    return s, v


def solve_fallback(eta: float, constraint: str = "independent", inequality: bool = False,
                   starts: int = 12, seed: int = 0,
                   max_iter: int = 3000) -> tuple[float, np.ndarray]:
    """Multistart projected-gradient ascent; returns (S, mixture weights)."""
    eta = _validate_eta(eta)
    _validate_scope(constraint)
    a, b, n = _fallback_constraints(eta, constraint, inequality)
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    best_s, best_q = -math.inf, None
    for _ in range(starts):
        z = gen.dirichlet(np.full(a.shape[1], 0.5))
        v0 = _project(z, a, b)
        if np.max(np.abs(a @ v0 - b)) > 1e-9:
            raise InfeasibleEfficiencyError(f"no feasible mixture at eta={eta}")
        s, v = _ascend(v0, a, b, n, max_iter)
        if s > best_s:
            best_s, best_q = s, v[:n].copy()
    if best_q is None or not math.isfinite(best_s):
        raise InfeasibleEfficiencyError(f"fallback found no defined mixture at eta={eta}")
    best_q = np.clip(best_q, 0.0, None)
    best_q /= best_q.sum()
    return best_s, best_q


def max_chsh_at_efficiency(eta: float, *, method: str = "both", constraint: str = "independent",
                           inequality: bool = False, starts: int = 12,
                           seed: int = 0) -> OptimizationResult:
    """Largest coincidence-conditioned S reachable by local strategies at efficiency eta.

    ``method`` is ``"both"`` (default), ``"lp"`` or ``"fallback"``; with both,
    ``s_max`` is the larger value and disagreement beyond 1e-3 is flagged.
    ``constraint`` picks the efficiency scope (see ``CONSTRAINT_SCOPES``) and
    ``inequality`` relaxes the pinned probabilities to lower bounds.
    """
    eta = _validate_eta(eta)
    if method not in ("both", "lp", "fallback"):
        raise ValueError(f"unknown method {method!r}")
    s_lp = q_lp = s_fb = q_fb = None
    if method in ("both", "lp"):
        s_lp, q_lp = solve_lp(eta, constraint, inequality)
    if method in ("both", "fallback"):
        s_fb, q_fb = solve_fallback(eta, constraint, inequality, starts=starts, seed=seed)
    candidates = [(s, q) for s, q in ((s_lp, q_lp), (s_fb, q_fb)) if s is not None]
    s_max, argmax = max(candidates, key=lambda c: c[0])
    result = OptimizationResult(eta, s_max, argmax, s_lp, s_fb, q_lp, q_fb)
    if result.flagged:
        log.warning("LP (%.6f) and fallback (%.6f) disagree at eta=%.4f", s_lp, s_fb, eta)
    return result


def scan_efficiency(etas: Sequence[float], **kwargs) -> list[OptimizationResult]:
    return [max_chsh_at_efficiency(e, **kwargs) for e in etas]


def critical_efficiency(target_s: float = QUANTUM_S, *, tol: float = 1e-4,
                        method: str = "both", s_tol: float = 1e-7, **kwargs) -> float:
    """Largest efficiency at which local strategies still reach ``target_s``.

    Bisection over [0.5, 1] on ``eta -> S_max(eta) - target_s``, using that
    S_max is nonincreasing in eta.
    """
    if not 2.0 - s_tol <= target_s <= 4.0 + s_tol:
        raise ValueError(f"target S must lie in [2, 4], got {target_s}")

    def reaches(eta):
        return max_chsh_at_efficiency(eta, method=method, **kwargs).s_max >= target_s - s_tol

    lo, hi = 0.5, 1.0
    if reaches(hi):
        return hi
    if not reaches(lo):
        raise BellLabError(f"target S={target_s} is not bracketed by eta in [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if reaches(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def realize_adversary(weights: Sequence[float]):
    """Local source whose hidden variable is a strategy index drawn by weight."""
    from .sources import strategy_mixture_source

    return strategy_mixture_source(weights, name="optimized-mixture")
