"""Independent reference computations used to freeze expected values.

Nothing here imports the code under test except for plain data types.
"""

import itertools
import math
from fractions import Fraction

from scipy.integrate import quad


def _sign(x):
    return 1 if x >= 0 else -1


def _kinks(*angles):
    # zeros of cos 2(angle - theta) on [0, pi)
    pts = set()
    for a in angles:
        for off in (math.pi / 4, 3 * math.pi / 4):
            pts.add((a + off) % math.pi)
    return sorted(pts)


def gg_coincidence_moments(alpha, beta):
    """(P(coincidence), E[a b ; coincidence]) for the one-sided detection model, by quadrature."""

    def joint(theta):
        cb = math.cos(2 * (beta - theta))
        return _sign(math.cos(2 * (alpha - theta))) * _sign(cb) * abs(cb) / math.pi

    def detect(theta):
        return abs(math.cos(2 * (beta - theta))) / math.pi

    pts = _kinks(alpha, beta)
    num = quad(joint, 0, math.pi, points=pts, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    den = quad(detect, 0, math.pi, points=pts, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    return den, num


def gg_conditional_correlation(alpha, beta):
    den, num = gg_coincidence_moments(alpha, beta)
    return num / den


def guess_mixture_enumeration(w):
    """Conditional S of the guessing adversary by enumerating (guess, setting) combinations."""
    w = Fraction(w)
    table = {(0, 0): 1, (0, 1): 1, (1, 0): 1, (1, 1): -1}
    signs = {(0, 0): 1, (0, 1): 1, (1, 0): 1, (1, 1): -1}
    s = Fraction(0)
    for setting in itertools.product((0, 1), repeat=2):
        num = den = Fraction(0)
        for guess in itertools.product((0, 1), repeat=2):
            if guess == setting:
                den += w / 4
                num += w / 4 * table[guess]
        # always-detect branch answers +1 on both sides
        den += 1 - w
        num += 1 - w
        s += signs[setting] * num / den
    return s


def station_law_brute_force(kind, transmission, eta, p_micro):
    """Outcome law by enumerating micro outcome x switch survival x routing x detector click."""
    routing = [(True, Fraction(1))] if kind == "active" else [(True, Fraction(1, 2)), (False, Fraction(1, 2))]
    law = {1: Fraction(0), -1: Fraction(0), 0: Fraction(0)}
    t, e = Fraction(transmission), Fraction(eta)
    for micro, pm in zip((1, -1, 0), map(Fraction, p_micro)):
        for survives, ps in ((True, t), (False, 1 - t)):
            for on, pr in routing:
                for clicks, pc in ((True, e), (False, 1 - e)):
                    out = micro if (micro != 0 and survives and on and clicks) else 0
                    law[out] += pm * ps * pr * pc
    return law
