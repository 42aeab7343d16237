"""Rate-region tracing: weight sweeps, hull extraction, containment.

A long-term rate region is traced by sweeping the priority weight over
a grid, calibrating the protocol at each weight, and simulating the
resulting operating point.  The achievable boundary is the upper convex
hull of the swept points; time sharing between calibrations reaches any
point under it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .channel import FadingConfig
from .joint_power_protocol import CalibrationError
from .simulator import run_sim


@dataclass(frozen=True)
class RatePoint:
    """One operating point of the region in bits/symbol per direction."""

    r12: float
    r21: float
    eta: float
    protocol: str
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RegionSweep:
    """Swept points plus the weights whose calibration failed."""

    points: list
    failures: list


def chebyshev_grid(n: int = 21) -> list:
    """n weights on (0, 1) clustered toward both ends.

    Chebyshev nodes resolve the region's flanks, where the boundary
    bends fastest, better than a uniform grid does.
    """
    if n < 1:
        raise ValueError("grid needs at least one node")
    nodes = [0.5 * (1.0 + math.cos((2 * k - 1) * math.pi / (2 * n))) for k in range(1, n + 1)]
    return sorted(nodes)


def sweep_region(factory, eta_grid, config: FadingConfig, n_slots: int = 200_000, seed: int = 1) -> RegionSweep:
    """Trace a region serially over eta_grid.

    factory(eta) returns a runnable protocol handle; a CalibrationError
    for some weight leaves a gap (recorded in failures) instead of
    aborting the sweep.
    """
    points = []
    failures = []
    for eta in eta_grid:
        try:
            handle = factory(eta)
        except CalibrationError as err:
            failures.append((eta, str(err)))
            continue
        stats = run_sim(handle, config, n_slots, seed)
        points.append(
            RatePoint(
                r12=stats.r12,
                r21=stats.r21,
                eta=eta,
                protocol=handle.kind,
                meta={"stats": stats, "handle": handle},
            )
        )
    return RegionSweep(points=points, failures=failures)


def _cross(o: RatePoint, a: RatePoint, b: RatePoint) -> float:
    return (a.r12 - o.r12) * (b.r21 - o.r21) - (a.r21 - o.r21) * (b.r12 - o.r12)


def upper_hull(points) -> tuple:
    """Upper convex boundary of the swept points, left to right.

    Returns (hull, interior) where hull lists the boundary points with
    r12 increasing and slope nonincreasing, and interior flags each
    input point that ended up strictly under the boundary.  Interior
    points are kept in the input list untouched; callers decide what a
    sub-boundary point means for them.
    """
    n = len(points)
    if n == 0:
        return [], []
    order = sorted(range(n), key=lambda i: (points[i].r12, points[i].r21))
    chain = []
    for i in order:
        # of several points sharing an abscissa only the topmost can survive
        while chain and points[chain[-1]].r12 == points[i].r12:
            chain.pop()
        while len(chain) >= 2 and _cross(points[chain[-2]], points[chain[-1]], points[i]) >= 0.0:
            chain.pop()
        chain.append(i)
    on_hull = set(chain)
    interior = [i not in on_hull for i in range(n)]
    return [points[i] for i in chain], interior


def support_value(points, weight: float) -> float:
    """Largest weighted sum weight*r12 + (1-weight)*r21 over the points."""
    if not points:
        raise ValueError("empty point set has no support value")
    return max(weight * p.r12 + (1.0 - weight) * p.r21 for p in points)
