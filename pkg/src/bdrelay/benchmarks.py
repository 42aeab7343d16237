"""Conventional fixed-schedule relaying benchmarks as linear programs.

Instead of picking one mode per slot, the conventional protocols share
each slot (or the long-run slot budget) between a preset subset of the
six modes.  The best split is a small dense linear program: maximize
the weighted pair of end-to-end rates subject to each direction's
uplink, downlink, and multi-user sum-rate budgets, with the time
fractions on the simplex.  A hand-rolled two-phase simplex keeps the
dependency surface flat; instances never exceed a dozen variables.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import FadingConfig, draw_blocks
from .joint_power_protocol import LN2

LP_TOL = 1e-9

PRESETS = {
    "all": (1, 2, 3, 4, 5, 6),
    "tdbc": (1, 2, 6),
    "traditional": (1, 2, 4, 5),
    "mabc": (3, 6),
    "hbc": (1, 2, 3, 6),
}


def normalize_subset(subset) -> tuple:
    """Resolve a preset name or iterable of mode indices to a sorted tuple."""
    if isinstance(subset, str):
        key = subset.strip().lower()
        if key not in PRESETS:
            raise ValueError(f"unknown mode subset preset {subset!r}")
        return PRESETS[key]
    modes = tuple(sorted(set(int(k) for k in subset)))
    if not modes or any(k < 1 or k > 6 for k in modes):
        raise ValueError("mode subset must be a nonempty subset of {1..6}")
    return modes


@dataclass(frozen=True)
class LinearProgram:
    """maximize c @ x subject to a_ub @ x <= b_ub, a_eq @ x = b_eq, x >= 0."""

    c: np.ndarray
    a_ub: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b_ub: np.ndarray = field(default_factory=lambda: np.zeros(0))
    a_eq: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class LPResult:
    status: str
    x: np.ndarray | None = None
    value: float = float("nan")
    dual: np.ndarray | None = None


def _pivot(tab, basis, row, col):
    tab[row] /= tab[row, col]
    for r in range(tab.shape[0]):
        if r != row and tab[r, col] != 0.0:
            tab[r] -= tab[r, col] * tab[row]
    basis[row] = col


def _simplex(tab, basis, allowed):
    """Bland-rule simplex on a tableau whose last row is the objective.

    The objective row holds reduced costs for a maximization; iteration
    stops when none is positive.  Returns False on unboundedness.
    """
    m = tab.shape[0] - 1
    while True:
        col = -1
        for j in allowed:
            if tab[m, j] > LP_TOL:
                col = j
                break
        if col < 0:
            return True
        row, best = -1, np.inf
        for r in range(m):
            a = tab[r, col]
            if a > LP_TOL:
                ratio = tab[r, -1] / a
                # Bland tie-break: smallest ratio, then smallest basis index
                if ratio < best - LP_TOL or (ratio < best + LP_TOL and (row < 0 or basis[r] < basis[row])):
                    row, best = r, ratio
        if row < 0:
            return False
        _pivot(tab, basis, row, col)


def solve_lp(lp: LinearProgram) -> LPResult:
    """Two-phase dense simplex with Bland's anti-cycling rule.

    Every row receives an artificial identity column, so phase 1 always
    starts from a feasible basis and the final objective row directly
    exposes the dual multipliers.  Weak duality is asserted on every
    successful solve.
    """
    c = np.asarray(lp.c, float)
    n = c.size
    a_ub = np.zeros((0, n)) if lp.a_ub is None else np.asarray(lp.a_ub, float).reshape(-1, n)
    a_eq = np.zeros((0, n)) if lp.a_eq is None else np.asarray(lp.a_eq, float).reshape(-1, n)
    b_ub = np.zeros(0) if lp.b_ub is None else np.atleast_1d(np.asarray(lp.b_ub, float))
    b_eq = np.zeros(0) if lp.b_eq is None else np.atleast_1d(np.asarray(lp.b_eq, float))
    m_ub, m_eq = a_ub.shape[0], a_eq.shape[0]
    m = m_ub + m_eq

    a = np.vstack([a_ub, a_eq]) if m else np.zeros((0, n))
    b = np.concatenate([b_ub, b_eq])
    slack = np.vstack([np.eye(m_ub), np.zeros((m_eq, m_ub))]) if m else np.zeros((0, 0))
    sign = np.where(b < 0.0, -1.0, 1.0)
    a = a * sign[:, None]
    b = b * sign
    slack = slack * sign[:, None]

    n_cols = n + m_ub + m
    tab = np.zeros((m + 1, n_cols + 1))
    tab[:m, :n] = a
    tab[:m, n:n + m_ub] = slack
    tab[:m, n + m_ub:n_cols] = np.eye(m)
    tab[:m, -1] = b
    basis = [n + m_ub + r for r in range(m)]
    art = list(range(n + m_ub, n_cols))

    # phase 1: drive the artificial variables to zero
    tab[m, art] = -1.0
    for r in range(m):
        tab[m] += tab[r]
    real = list(range(n + m_ub))
    if not _simplex(tab, basis, real):
        return LPResult(status="unbounded")
    if tab[m, -1] > 1e-7:
        return LPResult(status="infeasible")
    for r in range(m):
        if basis[r] >= n + m_ub and abs(tab[r, -1]) <= LP_TOL:
            for j in real:
                if abs(tab[r, j]) > LP_TOL:
                    _pivot(tab, basis, r, j)
                    break

    # phase 2: original objective over the real columns
    tab[m, :] = 0.0
    tab[m, :n] = c
    for r in range(m):
        if basis[r] < n:
            tab[m] -= tab[m, basis[r]] * tab[r]
    if not _simplex(tab, basis, real):
        return LPResult(status="unbounded")

    x = np.zeros(n)
    for r in range(m):
        if basis[r] < n:
            x[basis[r]] = tab[r, -1]
    value = float(c @ x)
    dual = -tab[m, n + m_ub:n_cols] * sign
    bound = float(dual[:m_ub] @ b_ub + dual[m_ub:] @ b_eq)
    assert value <= bound + 1e-7 * max(1.0, abs(bound)), "weak duality violated"
    return LPResult(status="optimal", x=x, value=value, dual=dual)


def _rate_lp(caps: dict, eta: float, subset: tuple) -> dict:
    """Shared LP over (r1r, r2r, time fractions) for a capacity tuple.

    Both directions forward through the relay, so each direction's rate
    is bounded by its uplink share and its downlink share; the sum-rate
    row binds only when the two-user uplink is in play.
    """
    modes = normalize_subset(subset)
    nv = 2 + len(modes)
    col = {k: 2 + i for i, k in enumerate(modes)}

    def row(rate_cols, budget):
        r = np.zeros(nv)
        for j, v in rate_cols:
            r[j] = v
        for k, v in budget:
            if k in col:
                r[col[k]] -= v
        return r

    rows = [
        row([(0, 1.0)], [(1, caps["c1r"]), (3, caps["c1r"])]),
        row([(1, 1.0)], [(2, caps["c2r"]), (3, caps["c2r"])]),
        row([(1, 1.0)], [(4, caps["cr1"]), (6, caps["cr1"])]),
        row([(0, 1.0)], [(5, caps["cr2"]), (6, caps["cr2"])]),
    ]
    if 3 in col:
        rows.insert(2, row([(0, 1.0), (1, 1.0)], [(1, caps["c1r"]), (2, caps["c2r"]), (3, caps["cr"])]))
    a_ub = np.array(rows)
    a_eq = np.zeros((1, nv))
    a_eq[0, 2:] = 1.0
    c = np.zeros(nv)
    c[0], c[1] = eta, 1.0 - eta
    res = solve_lp(LinearProgram(c=c, a_ub=a_ub, b_ub=np.zeros(len(rows)), a_eq=a_eq, b_eq=np.ones(1)))
    assert res.status == "optimal", f"rate LP unexpectedly {res.status}"
    deltas = np.zeros(6)
    for k, j in col.items():
        deltas[k - 1] = res.x[j]
    return {
        "r1r": float(res.x[0]),
        "r2r": float(res.x[1]),
        "rr1": float(res.x[1]),
        "rr2": float(res.x[0]),
        "deltas": deltas,
        "value": res.value,
    }


def _caps_at(s1, s2, p1, p2, pr) -> dict:
    c = lambda x: np.log1p(x) / LN2
    return {
        "c1r": c(p1 * s1),
        "c2r": c(p2 * s2),
        "cr": c(p1 * s1 + p2 * s2),
        "cr1": c(pr * s1),
        "cr2": c(pr * s2),
    }


def conv_slot_lp(state, eta: float, subset, powers) -> dict:
    """Best within-slot time sharing for one channel state.

    Data forwards through the relay inside the slot, so delay never
    exceeds one slot.  Returns the matched per-direction rates and the
    six time fractions.
    """
    caps = _caps_at(state.s1, state.s2, powers.p1, powers.p2, powers.pr)
    return _rate_lp({k: float(v) for k, v in caps.items()}, eta, subset)


def conv_longterm_lp(avg_caps: dict, eta: float, subset) -> dict:
    """Best long-run time sharing for mean capacities (infinite buffers)."""
    return _rate_lp(avg_caps, eta, subset)


def mean_capacities(config: FadingConfig, p1: float, p2: float, pr: float, sample_size: int = 100_000) -> dict:
    """Monte Carlo means of the five link capacities at fixed powers."""
    s1, s2 = draw_blocks(config, 0, sample_size)
    caps = _caps_at(s1, s2, p1, p2, pr)
    return {k: float(v.mean()) for k, v in caps.items()}


def equal_power_for_budget(pt: float, config: FadingConfig, subset, eta: float, sample_size: int = 100_000, rel_tol: float = 0.005) -> float:
    """Equal per-node power whose consumed average meets a total budget.

    With one mode active at a time the consumed power is P*(1 + share
    of the two-user uplink), so it is bisected over (0, Pt].
    """
    if not pt > 0.0:
        raise ValueError("power budget must be positive")
    s1, s2 = draw_blocks(config, 0, sample_size)

    def consumed(p):
        caps = {k: float(v.mean()) for k, v in _caps_at(s1, s2, p, p, p).items()}
        d = conv_longterm_lp(caps, eta, subset)["deltas"]
        return p * (1.0 + d[2])

    lo, hi = pt / 4.0, pt
    if abs(consumed(pt) - pt) <= rel_tol * pt:
        return pt
    while consumed(lo) > pt:
        lo /= 4.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        got = consumed(mid)
        if abs(got - pt) <= rel_tol * pt:
            return mid
        if got > pt:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)
