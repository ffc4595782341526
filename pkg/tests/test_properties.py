from __future__ import annotations

from dataclasses import replace

from hypothesis import given, settings
from hypothesis import strategies as st

from ecas_sim.channel import link_margin, load_params, rain_attenuation
from ecas_sim.control import make_policy
from ecas_sim.engine import Engine, RoundConfig, SensorSeed, start_state
from ecas_sim.experiment import data_path
from ecas_sim.phy import RadioConfig, airtime_symbols, dr_profile, min_send_interval, time_on_air
from ecas_sim.sensor import US

RADIO = RadioConfig(coding_rate=6, payload_bytes=11)
PARAMS = load_params(data_path("channel_params.cfg"))

rain = st.floats(0.0, 150.0, allow_nan=False)
distance = st.floats(100.0, 20_000.0, allow_nan=False)
dr = st.integers(0, 5)


@given(dr, distance, rain, rain)
def test_margin_nonincreasing_in_rain(d, dist, r1, r2):
    lo, hi = sorted((r1, r2))
    assert link_margin(d, dist, hi, RADIO, PARAMS) <= link_margin(d, dist, lo, RADIO, PARAMS)


@given(dr, distance, distance, rain)
def test_margin_nonincreasing_in_distance(d, a, b, r):
    near, far = sorted((a, b))
    assert link_margin(d, far, r, RADIO, PARAMS) <= link_margin(d, near, r, RADIO, PARAMS)


@given(st.integers(0, 4), distance, rain)
def test_slower_dr_has_more_margin(d, dist, r):
    assert link_margin(d, dist, r, RADIO, PARAMS) > link_margin(d + 1, dist, r, RADIO, PARAMS)


@given(distance)
def test_zero_rain_zero_attenuation(dist):
    assert rain_attenuation(0.0, dist, PARAMS) == 0.0


@given(st.integers(1, 5), st.integers(1, 64))
def test_symbol_time_doubles_per_spreading_factor(d, payload):
    cfg = replace(RADIO, payload_bytes=payload)
    slow, fast = dr_profile(d - 1), dr_profile(d)
    t_sym_slow = time_on_air(slow, cfg) / float(airtime_symbols(slow, cfg))
    t_sym_fast = time_on_air(fast, cfg) / float(airtime_symbols(fast, cfg))
    assert abs(t_sym_slow - 2 * t_sym_fast) < 1e-12


@given(st.floats(1e-4, 5.0), st.floats(0.001, 1.0), st.floats(1.0, 600.0))
def test_min_interval_respects_duty_and_period(toa, dc, period):
    iv = min_send_interval(toa, dc, period)
    assert iv >= period - 1e-9 and iv >= toa / dc - 1e-9


def _round(policy, r, index, sensors, duration=600.0):
    return RoundConfig(r, sensors, PARAMS, RADIO, policy, duration=duration, app_period=60.0, round_index=index)


steps = st.lists(st.floats(0.0, 5.0, allow_nan=False), min_size=1, max_size=12)


def _trajectory(first, deltas, down):
    rains, r = [first], first
    for step in deltas:
        r = min(145.0, r + step)
        rains.append(r)
    if down:
        for step in reversed(deltas):
            r = max(0.0, r - step)
            rains.append(r)
    return rains


@settings(max_examples=120, deadline=None)
@given(st.floats(0.0, 5.0), steps, st.booleans(), st.floats(500.0, 4000.0))
def test_conservative_never_loses_on_gentle_rain(first, deltas, down, far):
    rains = _trajectory(first, deltas, down)
    policy = make_policy("conservative")
    sensors = (SensorSeed("A", 300.0), SensorSeed("B", far))
    carry = None
    for i, r in enumerate(rains):
        c = _round(policy, r, i, sensors)
        engine = Engine(c, start_state(c, carry))
        stats = engine.run()
        carry = engine.state
        assert stats.lost == 0, (rains, i)


@settings(max_examples=40, deadline=None)
@given(st.lists(rain, min_size=1, max_size=6), st.integers(1, 5))
def test_aggressive_dr_never_increases(rains, trigger):
    policy = make_policy("aggressive", loss_trigger=trigger)
    sensors = (SensorSeed("S1", 2000.0), SensorSeed("S2", 4000.0), SensorSeed("S3", 6000.0))
    carry, history = None, {}
    for i, r in enumerate(rains):
        c = _round(policy, r, i, sensors)
        engine = Engine(c, start_state(c, carry), trace=True)
        stats = engine.run()
        carry = engine.state
        for _t, sid, _k, d, _ok in engine.messages:
            history.setdefault(sid, []).append(d)
        for ps in stats.per_sensor.values():
            assert ps.sent == ps.received + ps.lost
    for seq in history.values():
        assert all(b <= a for a, b in zip(seq, seq[1:]))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["fixed:0", "fixed:5", "aggressive", "conservative"]), rain)
def test_engine_deterministic_and_duty_spaced(name, r):
    sensors = (SensorSeed("S1", 2000.0), SensorSeed("S2", 6000.0))
    runs = []
    for _ in range(2):
        c = _round(make_policy(name), r, 0, sensors, duration=1800.0)
        engine = Engine(c, start_state(c, None), trace=True)
        engine.run()
        runs.append(engine)
    assert runs[0].trace == runs[1].trace
    starts, ends = {}, {}
    for ev in runs[0].trace:
        if ev.kind == "tx-start":
            starts.setdefault(ev.subject, []).append(ev.time_us)
        elif ev.kind == "tx-end":
            ends.setdefault(ev.subject, []).append(ev.payload[1])
    for sid, times in starts.items():
        drs = ends[sid]
        for i in range(1, len(times)):
            toa = time_on_air(dr_profile(drs[i - 1]), RADIO)
            assert (times[i] - times[i - 1]) / US >= min_send_interval(toa, 0.01, 60.0) - 1e-6
