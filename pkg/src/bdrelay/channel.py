"""Block-fading channel draws and instantaneous link capacities.

Both user-relay links undergo independent block Rayleigh fading: the
squared gains s1, s2 are exponential with means omega1, omega2 and stay
constant within a slot.  Capacities are in bits per channel use,
C(x) = log2(1 + x).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LN2 = float(np.log(2.0))

GAIN_STREAM = 0
COIN_STREAM = 1

GAIN_VALUES_PER_SLOT = 2
COIN_VALUES_PER_SLOT = 6


@dataclass(frozen=True)
class FadingConfig:
    """Fading statistics plus the seed that fixes the whole gain sequence."""

    omega1: float
    omega2: float
    seed: int

    def __post_init__(self):
        if not (self.omega1 > 0.0 and self.omega2 > 0.0):
            raise ValueError("fading means must be positive")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")


@dataclass(frozen=True)
class ChannelState:
    """One slot's squared channel gains."""

    s1: float
    s2: float
    slot: int


@dataclass(frozen=True)
class LinkCapacities:
    """Instantaneous capacities of every link for one slot.

    c1r/c2r are the single-user uplinks, cr the multiple-access sum
    bound, c12r/c21r the per-user multiple-access rates under decode
    order t, and cr1/cr2 the two downlinks.
    """

    c1r: float
    c2r: float
    cr: float
    c12r: float
    c21r: float
    cr1: float
    cr2: float


class CounterStream:
    """Deterministic uniform stream addressed by slot index.

    Slot i's values are a pure function of (seed, stream, i): the stream
    sits on the counter-based Philox generator with slots aligned to
    whole 4-word counter blocks, so jumping to any slot is O(1) and
    independent of what was drawn before.
    """

    def __init__(self, seed: int, stream: int = GAIN_STREAM, values_per_slot: int = GAIN_VALUES_PER_SLOT):
        if values_per_slot < 1:
            raise ValueError("values_per_slot must be positive")
        self._seed = int(seed)
        self._stream = int(stream)
        self._values = int(values_per_slot)
        self._blocks = (self._values + 3) // 4
        self._slot = 0

    @property
    def position(self) -> int:
        """Next slot index to be consumed by draw()."""
        return self._slot

    def jump(self, slot: int) -> "CounterStream":
        """Move the cursor to the given slot index."""
        if slot < 0:
            raise ValueError("slot must be nonnegative")
        self._slot = int(slot)
        return self

    def slot_uniforms(self, start_slot: int, n_slots: int) -> np.ndarray:
        """Uniforms for slots [start_slot, start_slot + n_slots), shape (n_slots, values_per_slot).

        Pure function of (seed, stream, slot); does not move the cursor.
        """
        if n_slots < 0 or start_slot < 0:
            raise ValueError("negative slot range")
        bitgen = np.random.Philox(key=[self._seed, self._stream])
        if start_slot:
            bitgen.advance(start_slot * self._blocks)
        raw = bitgen.random_raw(n_slots * self._blocks * 4)
        raw = np.asarray(raw, dtype=np.uint64).reshape(n_slots, self._blocks * 4)
        return (raw[:, : self._values] >> np.uint64(11)) * 2.0 ** -53

    def take(self, n_slots: int = 1) -> np.ndarray:
        """Consume the next n_slots slots of uniforms, advancing the cursor."""
        out = self.slot_uniforms(self._slot, n_slots)
        self._slot += n_slots
        return out


def gain_stream(config: FadingConfig) -> CounterStream:
    """The channel-gain stream for a config (2 uniforms per slot)."""
    return CounterStream(config.seed, GAIN_STREAM, GAIN_VALUES_PER_SLOT)


def coin_stream(seed: int) -> CounterStream:
    """The protocol-coin stream for a seed (6 uniforms per slot)."""
    return CounterStream(seed, COIN_STREAM, COIN_VALUES_PER_SLOT)


def draw_block(config: FadingConfig, rng: CounterStream) -> ChannelState:
    """Draw the next slot's fading state, advancing the stream cursor.

    Gains are inverse-CDF samples s = -omega * ln(1 - u), so the state
    for slot i is a pure function of (seed, i).
    """
    slot = rng.position
    u = rng.take(1)
    s1 = -config.omega1 * np.log1p(-u[:, 0])
    s2 = -config.omega2 * np.log1p(-u[:, 1])
    return ChannelState(s1=float(s1[0]), s2=float(s2[0]), slot=slot)


def draw_blocks(config: FadingConfig, start_slot: int, n_slots: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized gains for slots [start_slot, start_slot + n_slots)."""
    u = gain_stream(config).slot_uniforms(start_slot, n_slots)
    s1 = -config.omega1 * np.log1p(-u[:, 0])
    s2 = -config.omega2 * np.log1p(-u[:, 1])
    return s1, s2


def capacity(x):
    """C(x) = log2(1 + x), elementwise; stable near zero via log1p."""
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0.0):
        raise ValueError("capacity argument must be nonnegative")
    out = np.log1p(arr) / LN2
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def link_capacities(state: ChannelState, p1: float, p2: float, pr: float, t: float) -> LinkCapacities:
    """All link capacities for one slot at the given transmit powers.

    t in [0, 1] is the multiple-access decode-order share: c12r mixes
    the clean rate log2(1 + p1 s1) (decoded last, weight t) with the
    interference-limited rate cr - c2r (decoded first, weight 1 - t);
    c21r mirrors it, so c12r + c21r = cr for every t.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("decode-order share t must be in [0, 1]")
    g1 = p1 * state.s1
    g2 = p2 * state.s2
    c1r = capacity(g1)
    c2r = capacity(g2)
    cr = capacity(g1 + g2)
    c12r = t * c1r + (1.0 - t) * (cr - c2r)
    c21r = (1.0 - t) * c2r + t * (cr - c1r)
    return LinkCapacities(
        c1r=c1r,
        c2r=c2r,
        cr=cr,
        c12r=c12r,
        c21r=c21r,
        cr1=capacity(pr * state.s1),
        cr2=capacity(pr * state.s2),
    )
