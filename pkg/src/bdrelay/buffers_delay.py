"""Relay buffer state, buffer-aware capacities, and delay-targeted sizing.

For delay-constrained operation the relay keeps finite buffers.  Each
inflow link is clamped by the destination buffer's free space and each
outflow link by its source buffer's content; transmit powers are then
re-derived so a node spends only what the clamped rate actually needs.
A buffer sizing routine searches a common scale factor for the two
buffer capacities until a simulated run meets a target average delay.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import ChannelState, FadingConfig, LinkCapacities, draw_blocks
from .joint_power_protocol import (
    LN2,
    JointWeights,
    Mode,
    ModeDecision,
    PowerAlloc,
    _water_level,
)

BOUND_TOL = 1e-9


class DelaySizingError(RuntimeError):
    """Raised when no buffer size reaches the requested average delay."""

    def __init__(self, target: float, floor: float):
        super().__init__(
            f"average delay target {target:g} is below the achievable floor {floor:.3f} slots"
        )
        self.target = target
        self.floor = floor


@dataclass(frozen=True)
class BufferState:
    """Queued information in the two relay buffers, in bits/symbol.

    q1 holds data traveling user 1 -> user 2, q2 the reverse direction.
    Capacities default to unbounded.
    """

    q1: float = 0.0
    q2: float = 0.0
    q1max: float = math.inf
    q2max: float = math.inf

    def __post_init__(self):
        if not (0.0 <= self.q1 <= self.q1max and 0.0 <= self.q2 <= self.q2max):
            raise ValueError("queue contents must lie within [0, qmax]")


def virtual_capacities(caps: LinkCapacities, buf: BufferState) -> LinkCapacities:
    """Clamp link capacities by buffer space (inflows) and content (outflows).

    The sum capacity passes through unchanged; the clamped split no
    longer decomposes it.
    """
    space1 = buf.q1max - buf.q1
    space2 = buf.q2max - buf.q2
    return LinkCapacities(
        c1r=min(caps.c1r, space1),
        c2r=min(caps.c2r, space2),
        cr=caps.cr,
        c12r=min(caps.c12r, space1),
        c21r=min(caps.c21r, space2),
        cr1=min(caps.cr1, buf.q2),
        cr2=min(caps.cr2, buf.q1),
    )


def _invert(vcap: float, s: float) -> float:
    """Power that makes C(P*s) exactly vcap."""
    if vcap <= 0.0:
        return 0.0
    assert s > 0.0, "positive virtual capacity on a dead link"
    return math.expm1(vcap * LN2) / s


def modified_powers(state: ChannelState, vcaps: LinkCapacities, t: int) -> dict:
    """Per-mode transmit powers re-derived from the virtual capacities.

    Each entry holds exactly the power needed to realize the clamped
    rate(s) of that mode.  In the two-user uplink the user decoded
    first pays for the other's interference; the broadcast power is the
    larger of the two single-user inversions so both users decode.
    """
    s1, s2 = state.s1, state.s2
    p1_m1 = _invert(vcaps.c1r, s1)
    p2_m2 = _invert(vcaps.c2r, s2)
    if t == 0:
        p1_m3 = 2.0 ** vcaps.c21r * _invert(vcaps.c12r, s1)
        p2_m3 = _invert(vcaps.c21r, s2)
    else:
        p1_m3 = _invert(vcaps.c12r, s1)
        p2_m3 = 2.0 ** vcaps.c12r * _invert(vcaps.c21r, s2)
    pr_m4 = _invert(vcaps.cr1, s1)
    pr_m5 = _invert(vcaps.cr2, s2)
    return {
        Mode.M1: PowerAlloc(p1=p1_m1, p2=0.0, pr=0.0),
        Mode.M2: PowerAlloc(p1=0.0, p2=p2_m2, pr=0.0),
        Mode.M3: PowerAlloc(p1=p1_m3, p2=p2_m3, pr=0.0),
        Mode.M4: PowerAlloc(p1=0.0, p2=0.0, pr=pr_m4),
        Mode.M5: PowerAlloc(p1=0.0, p2=0.0, pr=pr_m5),
        Mode.M6: PowerAlloc(p1=0.0, p2=0.0, pr=max(pr_m4, pr_m5)),
    }


def apply_decision(buf: BufferState, d: ModeDecision) -> BufferState:
    """Advance the queues by one slot's decision.

    The decision's rates must already respect the buffer bounds (the
    caller clamps via virtual capacities); violations are protocol bugs.
    """
    q1, q2 = buf.q1, buf.q2
    if d.mode in (Mode.M1, Mode.M3):
        q1 += d.r1r
    if d.mode in (Mode.M2, Mode.M3):
        q2 += d.r2r
    if d.mode in (Mode.M5, Mode.M6):
        q1 -= d.rr2
    if d.mode in (Mode.M4, Mode.M6):
        q2 -= d.rr1
    assert -BOUND_TOL <= q1 <= buf.q1max + BOUND_TOL, "buffer 1 out of bounds"
    assert -BOUND_TOL <= q2 <= buf.q2max + BOUND_TOL, "buffer 2 out of bounds"
    q1 = min(max(q1, 0.0), buf.q1max)
    q2 = min(max(q2, 0.0), buf.q2max)
    return BufferState(q1=q1, q2=q2, q1max=buf.q1max, q2max=buf.q2max)


def _inflow_scales(handle, config: FadingConfig, sample_size: int = 50_000) -> tuple:
    """Mean uplink capacities at the calibrated powers, one per buffer.

    These set the natural unit for buffer capacity: a scale factor of
    about one holds a single slot's typical arrival.
    """
    from .fixed_power_protocol import _fixed_caps

    s1, s2 = draw_blocks(config, 0, sample_size)
    w = handle.weights
    if isinstance(w, JointWeights):
        nu = w.gamma * LN2
        p1 = _water_level(handle.eta - w.mu1, nu, s1)
        p2 = _water_level(1.0 - handle.eta - w.mu2, nu, s2)
        c1r = np.log1p(p1 * s1) / LN2
        c2r = np.log1p(p2 * s2) / LN2
    else:
        caps = _fixed_caps(s1, s2, handle.powers)
        c1r, c2r = caps["c1r"], caps["c2r"]
    return float(c1r.mean()), float(c2r.mean())


def size_buffers_for_delay(
    protocol,
    target_delay: float,
    config: FadingConfig,
    seed: int = 424242,
    sim_slots: int = 150_000,
    per_direction: bool = False,
    tol: float = 0.05,
) -> tuple:
    """Find buffer capacities whose simulated average delay hits a target.

    Bisects a shared scale factor kappa with qjmax = kappa * E{Cjr} until
    the mean of the two Little's-law delays is within tol of the target.
    With per_direction=True each buffer's factor is then refined against
    its own direction's delay.  Targets at or below one slot, or below
    the smallest reachable delay, raise DelaySizingError.
    """
    from dataclasses import replace

    from .simulator import run_sim

    if not target_delay > 1.0:
        raise DelaySizingError(target_delay, 1.0)
    kind = protocol.kind.replace("-DelayConstrained", "") + "-DelayConstrained"
    scale1, scale2 = _inflow_scales(protocol, config)

    def mean_delay(k1, k2):
        handle = replace(protocol, kind=kind, q1max=k1 * scale1, q2max=k2 * scale2)
        stats = run_sim(handle, config, sim_slots, seed)
        ds = [d for d in (stats.delay1, stats.delay2) if d is not None]
        return sum(ds) / len(ds) if ds else 0.0, stats

    def bisect(eval_fn, target):
        lo = 0.25
        d_lo, _ = eval_fn(lo)
        if d_lo > target:
            raise DelaySizingError(target, d_lo)
        hi = max(1.0, 2.0 * lo)
        d_hi, _ = eval_fn(hi)
        for _ in range(16):
            if d_hi >= target:
                break
            lo, d_lo = hi, d_hi
            hi *= 2.0
            d_hi, _ = eval_fn(hi)
        else:
            raise DelaySizingError(target, d_hi)
        best = (hi, d_hi) if abs(d_hi - target) < abs(d_lo - target) else (lo, d_lo)
        for _ in range(25):
            if abs(best[1] - target) <= tol * target:
                break
            mid = math.sqrt(lo * hi)
            d_mid, _ = eval_fn(mid)
            if abs(d_mid - target) < abs(best[1] - target):
                best = (mid, d_mid)
            if d_mid < target:
                lo = mid
            else:
                hi = mid
        return best[0]

    kappa = bisect(lambda k: mean_delay(k, k), target_delay)
    k1 = k2 = kappa
    if per_direction:
        k1 = bisect(lambda k: (mean_delay(k, k2)[1].delay1 or 0.0, None), target_delay)
        k2 = bisect(lambda k: (mean_delay(k1, k)[1].delay2 or 0.0, None), target_delay)
    return k1 * scale1, k2 * scale2
