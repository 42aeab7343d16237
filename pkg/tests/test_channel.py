from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdrelay.channel import (
    CounterStream,
    FadingConfig,
    capacity,
    coin_stream,
    draw_block,
    draw_blocks,
    gain_stream,
    link_capacities,
)


def make_state(s1, s2, slot=0):
    from bdrelay.channel import ChannelState

    return ChannelState(s1=s1, s2=s2, slot=slot)


def test_capacity_known_values():
    assert capacity(0.0) == 0.0
    assert capacity(1.0) == pytest.approx(1.0, abs=1e-15)
    assert capacity(3.0) == pytest.approx(2.0, abs=1e-15)


def test_capacity_rejects_negative():
    with pytest.raises(ValueError):
        capacity(-0.5)


def test_capacity_vectorized_matches_scalar():
    x = np.array([0.0, 0.5, 1.0, 7.0])
    out = capacity(x)
    assert out.shape == x.shape
    for xi, oi in zip(x, out):
        assert oi == capacity(float(xi))


def test_link_capacities_decode_order_extremes():
    # p1*s1 = 3, p2*s2 = 1
    st8 = make_state(3.0, 1.0)
    lc0 = link_capacities(st8, 1.0, 1.0, 1.0, t=0.0)
    assert lc0.cr == pytest.approx(math.log2(5.0), abs=1e-12)
    assert lc0.c21r == pytest.approx(1.0, abs=1e-12)
    assert lc0.c12r == pytest.approx(math.log2(5.0) - 1.0, abs=1e-12)
    lc1 = link_capacities(st8, 1.0, 1.0, 1.0, t=1.0)
    assert lc1.c12r == pytest.approx(2.0, abs=1e-12)
    assert lc1.c21r == pytest.approx(math.log2(5.0) - 2.0, abs=1e-12)


def test_link_capacities_rejects_bad_t():
    with pytest.raises(ValueError):
        link_capacities(make_state(1.0, 1.0), 1.0, 1.0, 1.0, t=1.5)


@settings(max_examples=200, deadline=None)
@given(
    s1=st.floats(1e-6, 1e3),
    s2=st.floats(1e-6, 1e3),
    p1=st.floats(0.0, 1e2),
    p2=st.floats(0.0, 1e2),
    t=st.floats(0.0, 1.0),
)
def test_decomposition_identity(s1, s2, p1, p2, t):
    lc = link_capacities(make_state(s1, s2), p1, p2, 1.0, t)
    assert abs(lc.c12r + lc.c21r - lc.cr) <= 1e-12 * max(1.0, lc.cr)
    # interference can only reduce each user's share
    assert lc.c12r <= lc.c1r + 1e-12
    assert lc.c21r <= lc.c2r + 1e-12


def test_draw_block_matches_bulk_and_is_jumpable():
    cfg = FadingConfig(omega1=1.5, omega2=0.5, seed=42)
    rng = gain_stream(cfg)
    seq = [draw_block(cfg, rng) for _ in range(64)]
    s1, s2 = draw_blocks(cfg, 0, 64)
    assert np.array_equal(s1, np.array([st_.s1 for st_ in seq]))
    assert np.array_equal(s2, np.array([st_.s2 for st_ in seq]))
    assert [st_.slot for st_ in seq] == list(range(64))
    # jumping straight to slot 40 reproduces the same state
    again = draw_block(cfg, gain_stream(cfg).jump(40))
    assert again == seq[40]
    # a mid-sequence window agrees with the full sequence
    w1, w2 = draw_blocks(cfg, 17, 5)
    assert np.array_equal(w1, s1[17:22])
    assert np.array_equal(w2, s2[17:22])


def test_streams_are_independent_of_seed_and_purpose():
    cfg_a = FadingConfig(1.0, 1.0, seed=1)
    cfg_b = FadingConfig(1.0, 1.0, seed=2)
    a1, _ = draw_blocks(cfg_a, 0, 100)
    b1, _ = draw_blocks(cfg_b, 0, 100)
    assert not np.array_equal(a1, b1)
    gains = gain_stream(cfg_a).slot_uniforms(0, 100)
    coins = coin_stream(1).slot_uniforms(0, 100)
    assert gains.shape == (100, 2)
    assert coins.shape == (100, 6)
    assert not np.array_equal(gains[:, 0], coins[:, 0])
    assert float(coins.min()) >= 0.0 and float(coins.max()) < 1.0


def test_gain_means_match_fading_config():
    cfg = FadingConfig(omega1=1.5, omega2=0.5, seed=7)
    s1, s2 = draw_blocks(cfg, 0, 200_000)
    assert float(s1.mean()) == pytest.approx(1.5, rel=0.02)
    assert float(s2.mean()) == pytest.approx(0.5, rel=0.02)
    assert float(s1.min()) >= 0.0


def test_counter_stream_take_advances_cursor():
    cs = CounterStream(9, stream=1, values_per_slot=6)
    first = cs.take(3)
    second = cs.take(2)
    both = CounterStream(9, stream=1, values_per_slot=6).slot_uniforms(0, 5)
    assert np.array_equal(np.vstack([first, second]), both)
    assert cs.position == 5


def test_fading_config_validation():
    with pytest.raises(ValueError):
        FadingConfig(omega1=0.0, omega2=1.0, seed=0)
    with pytest.raises(ValueError):
        FadingConfig(omega1=1.0, omega2=1.0, seed=-3)
