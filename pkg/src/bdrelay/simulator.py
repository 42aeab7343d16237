"""Slot-by-slot Monte Carlo driver for all protocol variants.

A run draws the fading sequence from a counter-based stream keyed by
the run seed, asks the protocol for each slot's decision, pushes the
realized rates through the relay queues, and accumulates long-run
statistics in compensated sums.  Mode selection itself vectorizes over
chunks; the queue recursion is inherently sequential, so a thin Python
loop applies the content/space clamps, tracks a fluid FIFO ledger for
delay measurement, and audits conservation.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .benchmarks import conv_longterm_lp, conv_slot_lp, normalize_subset
from .channel import ChannelState, FadingConfig, coin_stream, draw_blocks
from .fixed_power_protocol import FixedWeights, NodePowers, _fixed_caps, batch_fixed_decisions
from .joint_power_protocol import (
    LN2,
    JointWeights,
    batch_decisions,
    decoding_order,
    _slot_table,
)

CHUNK = 1 << 16
WARMUP_FRACTION = 0.01

KINDS = (
    "JointAMS",
    "FixedAMS",
    "JointAMS-DelayConstrained",
    "FixedAMS-DelayConstrained",
    "ConvSlotLP",
    "ConvLongTermLP",
)


class _Kahan:
    """Compensated accumulator; exact enough for 1e8 small additions."""

    __slots__ = ("hi", "lo")

    def __init__(self):
        self.hi = 0.0
        self.lo = 0.0

    def add(self, x):
        y = x + self.lo
        t = self.hi + y
        self.lo = y - (t - self.hi)
        self.hi = t

    @property
    def total(self):
        return self.hi + self.lo


class _Ledger:
    """Fluid FIFO delay bookkeeping for one buffer.

    Bits leave in arrival order; each departing piece contributes its
    slot age.  Departures during the warm-up window are not counted.
    """

    __slots__ = ("pieces", "warmup", "delay", "delivered")

    def __init__(self, warmup: int):
        self.pieces = deque()
        self.warmup = warmup
        self.delay = _Kahan()
        self.delivered = _Kahan()

    def push(self, slot, amount):
        self.pieces.append([slot, amount])

    def pop(self, slot, amount):
        pieces = self.pieces
        count = slot >= self.warmup
        while amount > 1e-15 and pieces:
            head = pieces[0]
            take = head[1] if head[1] <= amount else amount
            if count:
                self.delay.add(take * (slot - head[0]))
                self.delivered.add(take)
            head[1] -= take
            amount -= take
            if head[1] <= 1e-15:
                pieces.popleft()

    def mean(self):
        out = self.delivered.total
        return self.delay.total / out if out > 0.0 else None


def littles_delay(mean_q: float, mean_inflow: float):
    """Average delay in slots; None when undefined (no inflow)."""
    if mean_q == 0.0:
        return 0.0
    if mean_inflow > 0.0:
        return mean_q / mean_inflow
    return None


@dataclass(frozen=True)
class SimStats:
    """Long-run averages of one simulation run.

    Rates are bits/symbol: r1r/r2r are uplink inflows, rr1/rr2 the
    delivered (content-clamped) downlink outflows, and r12/r21 the
    end-to-end rates, equal to rr2/rr1 by construction.  delay1/delay2
    are Little's-law estimates over the post-warm-up window and
    fifo_delay1/fifo_delay2 the directly measured FIFO figures; all are
    None when undefined for the protocol.
    """

    r12: float
    r21: float
    r1r: float
    r2r: float
    rr1: float
    rr2: float
    pbar1: float
    pbar2: float
    pbarr: float
    mode_freq: tuple
    mean_q1: float
    mean_q2: float
    delay1: float | None
    delay2: float | None
    fifo_delay1: float | None
    fifo_delay2: float | None
    n_slots: int


@dataclass(frozen=True)
class ProtocolHandle:
    """A runnable protocol: kind tag plus its calibration payload."""

    kind: str
    eta: float
    weights: object = None
    powers: NodePowers | None = None
    subset: tuple = (1, 2, 3, 4, 5, 6)
    q1max: float = math.inf
    q2max: float = math.inf

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown protocol kind {self.kind!r}")
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie strictly inside (0, 1)")
        if self.kind.startswith("JointAMS"):
            if not isinstance(self.weights, JointWeights):
                raise ValueError("joint protocol needs calibrated joint weights")
        elif self.kind.startswith("FixedAMS"):
            if not isinstance(self.weights, FixedWeights) or self.powers is None:
                raise ValueError("fixed protocol needs fixed weights and node powers")
        else:
            if self.powers is None:
                raise ValueError("conventional protocols need node powers")
            object.__setattr__(self, "subset", normalize_subset(self.subset))
        if self.kind.endswith("DelayConstrained"):
            if not (0.0 < self.q1max < math.inf and 0.0 < self.q2max < math.inf):
                raise ValueError("delay-constrained runs need finite buffer capacities")


def run_sim(handle: ProtocolHandle, config: FadingConfig, n_slots: int, seed: int) -> SimStats:
    """Simulate n_slots of the protocol; deterministic in all arguments."""
    if n_slots < 1:
        raise ValueError("n_slots must be at least 1")
    run_cfg = FadingConfig(config.omega1, config.omega2, seed=seed)
    if handle.kind in ("JointAMS", "FixedAMS"):
        return _run_ams(handle, run_cfg, n_slots)
    if handle.kind == "FixedAMS-DelayConstrained":
        return _run_fixed_dc(handle, run_cfg, n_slots)
    if handle.kind == "JointAMS-DelayConstrained":
        return _run_joint_dc(handle, run_cfg, n_slots)
    if handle.kind == "ConvSlotLP":
        return _run_conv_slot(handle, run_cfg, n_slots)
    return _run_conv_longterm(handle, run_cfg, n_slots)


class _Tally:
    """Shared accumulation and SimStats assembly for sequential runs."""

    def __init__(self, n_slots):
        self.n = n_slots
        self.warmup = int(WARMUP_FRACTION * n_slots)
        self.sums = {k: _Kahan() for k in ("r1r", "r2r", "rr1", "rr2", "p1", "p2", "pr", "q1", "q2", "in1", "in2")}
        self.mode_counts = np.zeros(7, dtype=np.int64)
        self.led1 = _Ledger(self.warmup)
        self.led2 = _Ledger(self.warmup)

    def queue_sample(self, slot, q1, q2):
        if slot >= self.warmup:
            self.sums["q1"].add(q1)
            self.sums["q2"].add(q2)

    def stats(self):
        n = self.n
        post = max(n - self.warmup, 1)
        s = {k: v.total for k, v in self.sums.items()}
        mean_q1, mean_q2 = s["q1"] / post, s["q2"] / post
        return SimStats(
            r12=s["rr2"] / n,
            r21=s["rr1"] / n,
            r1r=s["r1r"] / n,
            r2r=s["r2r"] / n,
            rr1=s["rr1"] / n,
            rr2=s["rr2"] / n,
            pbar1=s["p1"] / n,
            pbar2=s["p2"] / n,
            pbarr=s["pr"] / n,
            mode_freq=tuple(float(c) / n for c in self.mode_counts[1:]),
            mean_q1=mean_q1,
            mean_q2=mean_q2,
            delay1=littles_delay(mean_q1, s["in1"] / post),
            delay2=littles_delay(mean_q2, s["in2"] / post),
            fifo_delay1=self.led1.mean(),
            fifo_delay2=self.led2.mean(),
            n_slots=n,
        )


def _run_ams(handle, run_cfg, n_slots):
    """Unconstrained adaptive mode selection: infinite relay buffers.

    Selection never sees the queues, so decisions vectorize per chunk;
    the sequential pass clamps outflows by buffer content.  A node
    spends its full selected power even when the clamp wastes part of
    the rate.
    """
    tally = _Tally(n_slots)
    w, eta = handle.weights, handle.eta
    joint = handle.kind == "JointAMS"
    q1 = q2 = 0.0
    for start in range(0, n_slots, CHUNK):
        m = min(CHUNK, n_slots - start)
        s1, s2 = draw_blocks(run_cfg, start, m)
        u = coin_stream(run_cfg.seed).slot_uniforms(start, m)
        if joint:
            d = batch_decisions(s1, s2, w, eta, u)
        else:
            d = batch_fixed_decisions(s1, s2, handle.powers, w, eta, u)
        tally.mode_counts += np.bincount(d["mode"], minlength=7)
        for key in ("r1r", "r2r", "p1", "p2", "pr"):
            tally.sums[key].add(float(d[key].sum()))
        lo = max(tally.warmup - start, 0)
        if lo < m:
            tally.sums["in1"].add(float(d["r1r"][lo:].sum()))
            tally.sums["in2"].add(float(d["r2r"][lo:].sum()))
        r1r, r2r = d["r1r"].tolist(), d["r2r"].tolist()
        rr1, rr2 = d["rr1"].tolist(), d["rr2"].tolist()
        for k in range(m):
            i = start + k
            a1, a2 = r1r[k], r2r[k]
            if a1 > 0.0:
                q1 += a1
                tally.led1.push(i, a1)
            if a2 > 0.0:
                q2 += a2
                tally.led2.push(i, a2)
            o1, o2 = rr2[k], rr1[k]
            if o1 > 0.0:
                if o1 > q1:
                    o1 = q1
                q1 -= o1
                tally.led1.pop(i, o1)
                tally.sums["rr2"].add(o1)
            if o2 > 0.0:
                if o2 > q2:
                    o2 = q2
                q2 -= o2
                tally.led2.pop(i, o2)
                tally.sums["rr1"].add(o2)
            tally.queue_sample(i, q1, q2)
    return tally.stats()


def _run_fixed_dc(handle, run_cfg, n_slots):
    """Fixed-power selection on buffer-clamped capacities.

    Metrics re-weight the virtual capacities each slot, so a full mode
    never overrides the relay's need to drain.  Scheduled nodes still
    spend their full fixed power.
    """
    tally = _Tally(n_slots)
    w, eta, powers = handle.weights, handle.eta, handle.powers
    wa, wb = eta - w.mu1, 1.0 - eta - w.mu2
    mu1, mu2 = w.mu1, w.mu2
    q1max, q2max = handle.q1max, handle.q2max
    pw = (powers.p1, powers.p2, powers.pr)
    q1 = q2 = 0.0
    for start in range(0, n_slots, CHUNK):
        m = min(CHUNK, n_slots - start)
        s1, s2 = draw_blocks(run_cfg, start, m)
        caps = _fixed_caps(s1, s2, powers)
        c1r, c2r = caps["c1r"].tolist(), caps["c2r"].tolist()
        cr = caps["cr"].tolist()
        cr1, cr2 = caps["cr1"].tolist(), caps["cr2"].tolist()
        u = coin_stream(run_cfg.seed).slot_uniforms(start, m)
        heads = [(u[:, j] < p).tolist() for j, p in enumerate((w.p1, w.p2, w.p3, w.p4))]
        if w.p5 is None:
            part_a = None
        else:
            part_a = (u[:, 4] < w.p5).tolist()
        if w.region == "S0":
            tcoin = (u[:, 5] < w.p6).astype(int).tolist()
        else:
            tcoin = [int(w.p6)] * m
        for k in range(m):
            i = start + k
            sp1 = q1max - q1
            sp2 = q2max - q2
            tk = tcoin[k]
            if tk == 0:
                c12, c21 = cr[k] - c2r[k], c2r[k]
            else:
                c12, c21 = c1r[k], cr[k] - c1r[k]
            vc = (
                c1r[k] if c1r[k] < sp1 else sp1,
                c2r[k] if c2r[k] < sp2 else sp2,
                c12 if c12 < sp1 else sp1,
                c21 if c21 < sp2 else sp2,
                cr1[k] if cr1[k] < q2 else q2,
                cr2[k] if cr2[k] < q1 else q1,
            )
            vals = (
                wa * vc[0],
                wb * vc[1],
                wa * vc[2] + wb * vc[3],
                mu2 * vc[4],
                mu1 * vc[5],
                mu1 * vc[5] + mu2 * vc[4],
            )
            h1, h2, h3, h4 = heads[0][k], heads[1][k], heads[2][k], heads[3][k]
            if part_a is None:
                ak = bk = True
            else:
                ak = part_a[k]
                bk = not ak
            elig = (not h1 and ak, not h2 and ak, h1 and h2 and ak,
                    not h3 and bk, not h4 and bk, h3 and h4 and bk)
            best, mode = -1.0, 0
            for j in range(6):
                if elig[j] and vals[j] > best:
                    best, mode = vals[j], j + 1
            tally.mode_counts[mode] += 1
            a1 = a2 = o1 = o2 = 0.0
            if mode == 1:
                a1 = vc[0]
                tally.sums["p1"].add(pw[0])
            elif mode == 2:
                a2 = vc[1]
                tally.sums["p2"].add(pw[1])
            elif mode == 3:
                a1, a2 = vc[2], vc[3]
                tally.sums["p1"].add(pw[0])
                tally.sums["p2"].add(pw[1])
            elif mode == 4:
                o2 = vc[4]
                tally.sums["pr"].add(pw[2])
            elif mode == 5:
                o1 = vc[5]
                tally.sums["pr"].add(pw[2])
            else:
                o1, o2 = vc[5], vc[4]
                tally.sums["pr"].add(pw[2])
            if a1 > 0.0:
                q1 += a1
                tally.sums["r1r"].add(a1)
                tally.led1.push(i, a1)
                if i >= tally.warmup:
                    tally.sums["in1"].add(a1)
            if a2 > 0.0:
                q2 += a2
                tally.sums["r2r"].add(a2)
                tally.led2.push(i, a2)
                if i >= tally.warmup:
                    tally.sums["in2"].add(a2)
            if o1 > 0.0:
                q1 -= o1
                tally.sums["rr2"].add(o1)
                tally.led1.pop(i, o1)
            if o2 > 0.0:
                q2 -= o2
                tally.sums["rr1"].add(o2)
                tally.led2.pop(i, o2)
            tally.queue_sample(i, q1, q2)
    return tally.stats()


def _invert_cap(vcap, s):
    return math.expm1(vcap * LN2) / s if vcap > 0.0 else 0.0


def _run_joint_dc(handle, run_cfg, n_slots):
    """Joint-power selection on virtual capacities and re-derived powers.

    Per-mode optimal powers and capacities are precomputed in bulk; the
    sequential pass clamps each mode's rates by the queues, inverts the
    powers the clamped rates actually need, and re-scores the metrics
    with those powers before selecting.
    """
    tally = _Tally(n_slots)
    w, eta = handle.weights, handle.eta
    wa, wb = eta - w.mu1, 1.0 - eta - w.mu2
    mu1, mu2, gamma = w.mu1, w.mu2, w.gamma
    q1max, q2max = handle.q1max, handle.q2max
    t_order = decoding_order(w, eta)
    q1 = q2 = 0.0
    for start in range(0, n_slots, CHUNK):
        m = min(CHUNK, n_slots - start)
        s1a, s2a = draw_blocks(run_cfg, start, m)
        tab = _slot_table(s1a, s2a, w.mu1, w.mu2, w.gamma, eta, t_order)
        u = coin_stream(run_cfg.seed).slot_uniforms(start, m)
        if w.region == "S0":
            elig_rows = None
        elif w.region.startswith("S1"):
            ca = (u[:, 0] < w.p1).tolist()
            cb = (u[:, 1] < w.p2).tolist()
            elig_rows = "S1"
        else:
            ca = (u[:, 0] < w.p3).tolist()
            cb = (u[:, 1] < w.p4).tolist()
            elig_rows = "S2"
        s1, s2 = s1a.tolist(), s2a.tolist()
        c1r_m1 = tab["c1r_m1"].tolist()
        c2r_m2 = tab["c2r_m2"].tolist()
        c12r_m3 = tab["c12r_m3"].tolist()
        c21r_m3 = tab["c21r_m3"].tolist()
        cr1_m4 = tab["cr1_m4"].tolist()
        cr2_m5 = tab["cr2_m5"].tolist()
        cr1_m6 = tab["cr1_m6"].tolist()
        cr2_m6 = tab["cr2_m6"].tolist()
        for k in range(m):
            i = start + k
            sp1 = q1max - q1
            sp2 = q2max - q2
            s1k, s2k = s1[k], s2[k]

            v1c = c1r_m1[k] if c1r_m1[k] < sp1 else sp1
            p1_1 = _invert_cap(v1c, s1k)
            v2c = c2r_m2[k] if c2r_m2[k] < sp2 else sp2
            p2_2 = _invert_cap(v2c, s2k)
            v12 = c12r_m3[k] if c12r_m3[k] < sp1 else sp1
            v21 = c21r_m3[k] if c21r_m3[k] < sp2 else sp2
            if t_order == 0:
                p1_3 = 2.0 ** v21 * _invert_cap(v12, s1k)
                p2_3 = _invert_cap(v21, s2k)
            else:
                p1_3 = _invert_cap(v12, s1k)
                p2_3 = 2.0 ** v12 * _invert_cap(v21, s2k)
            v4c = cr1_m4[k] if cr1_m4[k] < q2 else q2
            pr_4 = _invert_cap(v4c, s1k)
            v5c = cr2_m5[k] if cr2_m5[k] < q1 else q1
            pr_5 = _invert_cap(v5c, s2k)
            v6c1 = cr1_m6[k] if cr1_m6[k] < q2 else q2
            v6c2 = cr2_m6[k] if cr2_m6[k] < q1 else q1
            pr_6 = max(_invert_cap(v6c1, s1k), _invert_cap(v6c2, s2k))

            vals = (
                wa * v1c - gamma * p1_1,
                wb * v2c - gamma * p2_2,
                wa * v12 + wb * v21 - gamma * (p1_3 + p2_3),
                mu2 * v4c - gamma * pr_4,
                mu1 * v5c - gamma * pr_5,
                mu1 * v6c2 + mu2 * v6c1 - gamma * pr_6,
            )
            if elig_rows is None:
                elig = (True, True, True, False, False, True)
            elif elig_rows == "S1":
                h1, h2 = ca[k], cb[k]
                elig = (not h1, True, True, h1 and not h2, False, h1 and h2)
            else:
                h3, h4 = ca[k], cb[k]
                elig = (True, not h3, True, False, h3 and not h4, h3 and h4)
            best, mode = -math.inf, 0
            for j in range(6):
                if elig[j] and vals[j] > best:
                    best, mode = vals[j], j + 1
            tally.mode_counts[mode] += 1
            a1 = a2 = o1 = o2 = 0.0
            if mode == 1:
                a1 = v1c
                tally.sums["p1"].add(p1_1)
            elif mode == 2:
                a2 = v2c
                tally.sums["p2"].add(p2_2)
            elif mode == 3:
                a1, a2 = v12, v21
                tally.sums["p1"].add(p1_3)
                tally.sums["p2"].add(p2_3)
            elif mode == 4:
                o2 = v4c
                tally.sums["pr"].add(pr_4)
            elif mode == 5:
                o1 = v5c
                tally.sums["pr"].add(pr_5)
            else:
                o1, o2 = v6c2, v6c1
                tally.sums["pr"].add(pr_6)
            if a1 > 0.0:
                q1 += a1
                tally.sums["r1r"].add(a1)
                tally.led1.push(i, a1)
                if i >= tally.warmup:
                    tally.sums["in1"].add(a1)
            if a2 > 0.0:
                q2 += a2
                tally.sums["r2r"].add(a2)
                tally.led2.push(i, a2)
                if i >= tally.warmup:
                    tally.sums["in2"].add(a2)
            if o1 > 0.0:
                q1 -= o1
                tally.sums["rr2"].add(o1)
                tally.led1.pop(i, o1)
            if o2 > 0.0:
                q2 -= o2
                tally.sums["rr1"].add(o2)
                tally.led2.pop(i, o2)
            tally.queue_sample(i, q1, q2)
    return tally.stats()


def _run_conv_slot(handle, run_cfg, n_slots):
    """Per-slot time-sharing LP: forwarding completes within each slot."""
    tally = _Tally(n_slots)
    powers, eta, subset = handle.powers, handle.eta, handle.subset
    delta_sum = np.zeros(6)
    for start in range(0, n_slots, CHUNK):
        m = min(CHUNK, n_slots - start)
        s1, s2 = draw_blocks(run_cfg, start, m)
        for k in range(m):
            sol = conv_slot_lp(ChannelState(s1[k], s2[k], start + k), eta, subset, powers)
            d = sol["deltas"]
            tally.sums["r1r"].add(float(sol["r1r"]))
            tally.sums["r2r"].add(float(sol["r2r"]))
            tally.sums["rr1"].add(float(sol["rr1"]))
            tally.sums["rr2"].add(float(sol["rr2"]))
            tally.sums["p1"].add(float(powers.p1 * (d[0] + d[2])))
            tally.sums["p2"].add(float(powers.p2 * (d[1] + d[2])))
            tally.sums["pr"].add(float(powers.pr * (d[3] + d[4] + d[5])))
            delta_sum += d
    base = tally.stats()
    return replace(
        base,
        mode_freq=tuple(float(x) / n_slots for x in delta_sum),
        delay1=1.0,
        delay2=1.0,
        fifo_delay1=1.0,
        fifo_delay2=1.0,
    )


def _run_conv_longterm(handle, run_cfg, n_slots):
    """Long-run time-sharing LP over this run's mean capacities."""
    powers, eta, subset = handle.powers, handle.eta, handle.subset
    sums = {k: _Kahan() for k in ("c1r", "c2r", "cr", "cr1", "cr2")}
    for start in range(0, n_slots, CHUNK):
        m = min(CHUNK, n_slots - start)
        s1, s2 = draw_blocks(run_cfg, start, m)
        caps = _fixed_caps(s1, s2, powers)
        for key in sums:
            sums[key].add(float(caps[key].sum()))
    avg = {k: v.total / n_slots for k, v in sums.items()}
    sol = conv_longterm_lp(avg, eta, subset)
    d = sol["deltas"]
    return SimStats(
        r12=float(sol["rr2"]),
        r21=float(sol["rr1"]),
        r1r=float(sol["r1r"]),
        r2r=float(sol["r2r"]),
        rr1=float(sol["rr1"]),
        rr2=float(sol["rr2"]),
        pbar1=float(powers.p1 * (d[0] + d[2])),
        pbar2=float(powers.p2 * (d[1] + d[2])),
        pbarr=float(powers.pr * (d[3] + d[4] + d[5])),
        mode_freq=tuple(float(x) for x in d),
        mean_q1=0.0,
        mean_q2=0.0,
        delay1=None,
        delay2=None,
        fifo_delay1=None,
        fifo_delay2=None,
        n_slots=n_slots,
    )
