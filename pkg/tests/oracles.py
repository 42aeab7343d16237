"""Independent numeric oracles used by the test suite.

Everything here is deliberately written from first principles (plain
math, grid and golden-section searches) so closed-form results in the
package can be checked against code that shares none of its internals.
"""

from __future__ import annotations

import math

import numpy as np

LN2 = math.log(2.0)


def cap(x: float) -> float:
    return math.log2(1.0 + x)


def golden_max(f, lo: float, hi: float, iters: int = 120):
    """Golden-section maximizer for a unimodal function on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def numeric_broadcast_power(s1, s2, mu1, mu2, gamma):
    """Best common downlink power for mu1*C(p*s2) + mu2*C(p*s1) - gamma*p."""

    def objective(p):
        return mu1 * cap(p * s2) + mu2 * cap(p * s1) - gamma * p

    nu = gamma * LN2
    hi = (mu1 + mu2) / nu + 1.0
    p_star, val = golden_max(objective, 0.0, hi)
    if objective(0.0) >= val:
        return 0.0, objective(0.0)
    return p_star, val


def ma_split(p1, p2, s1, s2, t):
    """Rate pair of the two-user uplink at given powers and decode order."""
    g1, g2 = p1 * s1, p2 * s2
    total = cap(g1 + g2)
    if t == 0:
        c21 = cap(g2)
        return total - c21, c21
    c12 = cap(g1)
    return c12, total - c12


def numeric_ma_best(s1, s2, wa, wb, gamma, t, grid=160, rounds=3):
    """Grid-refined maximizer of the weighted two-user uplink metric."""

    def value(p1, p2):
        c12, c21 = ma_split(p1, p2, s1, s2, t)
        return wa * c12 + wb * c21 - gamma * (p1 + p2)

    nu = gamma * LN2
    span = (max(wa, 0.0) + max(wb, 0.0)) / nu + 1.0
    lo1 = lo2 = 0.0
    hi1 = hi2 = span
    best = (0.0, 0.0, value(0.0, 0.0))
    for _ in range(rounds):
        p1s = np.linspace(lo1, hi1, grid)
        p2s = np.linspace(lo2, hi2, grid)
        vals = np.array([[value(a, b) for b in p2s] for a in p1s])
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        if vals[i, j] > best[2]:
            best = (p1s[i], p2s[j], vals[i, j])
        w1 = (hi1 - lo1) / (grid - 1)
        w2 = (hi2 - lo2) / (grid - 1)
        lo1, hi1 = max(0.0, p1s[i] - 2 * w1), p1s[i] + 2 * w1
        lo2, hi2 = max(0.0, p2s[j] - 2 * w2), p2s[j] + 2 * w2
    return best


def numeric_mode_metrics(s1, s2, eta, mu1, mu2, gamma, t):
    """All six mode metrics rebuilt from scratch with numeric searches."""
    nu = gamma * LN2
    wa = eta - mu1
    wb = 1.0 - eta - mu2
    p1 = max(wa / nu - 1.0 / s1, 0.0)
    p2 = max(wb / nu - 1.0 / s2, 0.0)
    p4 = max(mu2 / nu - 1.0 / s1, 0.0)
    p5 = max(mu1 / nu - 1.0 / s2, 0.0)
    v1 = wa * cap(p1 * s1) - gamma * p1
    v2 = wb * cap(p2 * s2) - gamma * p2
    v3 = numeric_ma_best(s1, s2, wa, wb, gamma, t)[2]
    v4 = mu2 * cap(p4 * s1) - gamma * p4
    v5 = mu1 * cap(p5 * s2) - gamma * p5
    _, v6 = numeric_broadcast_power(s1, s2, mu1, mu2, gamma)
    return np.array([v1, v2, v3, v4, v5, v6])
