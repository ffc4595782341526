from __future__ import annotations

import pytest

from ecas_sim.channel import link_margin, load_params
from ecas_sim.control import (
    EXTERNAL,
    LOCAL,
    AggressivePolicy,
    ContextRecord,
    LossEvent,
    PolicyState,
    UnknownSensorError,
    UnknownZoneError,
    ZoneEvent,
    ZoneNetwork,
    aggressive_update,
    conservative_select,
    line_topology,
    make_policy,
    selective_route,
    sync_filter,
)
from ecas_sim.experiment import data_path
from ecas_sim.phy import RadioConfig
from ecas_sim.sensor import SensorState

RADIO = RadioConfig(coding_rate=6, payload_bytes=11)
PARAMS = load_params(data_path("channel_params.cfg"))


def _edge(dr, distance):
    lo, hi = 0.0, 150.0
    for _ in range(60):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if link_margin(dr, distance, mid, RADIO, PARAMS) >= 0 else (lo, mid)
    return lo


def test_conservative_select_uses_offset():
    s4 = SensorState("S2", 4000.0)
    edge = _edge(5, 4000.0)
    assert conservative_select(s4, edge - 5.0 - 1e-6, RADIO, PARAMS) == 5
    assert conservative_select(s4, edge - 5.0 + 1e-6, RADIO, PARAMS) == 4
    assert conservative_select(s4, edge - 5.0 - 1e-6, RADIO, PARAMS, offset=6.0) == 4


def test_conservative_falls_back_to_dr0():
    far = SensorState("S9", 50_000.0)
    assert conservative_select(far, 0.0, RADIO, PARAMS) == 0


def _state():
    return PolicyState("aggressive", {"S1": 5, "S2": 3}, loss_trigger=2)


def test_aggressive_steps_after_trigger():
    st = _state()
    st, cmd = aggressive_update(st, LossEvent("S1", 0, 0, 10, dr=5))
    assert cmd is None and st.dr["S1"] == 5
    st, cmd = aggressive_update(st, LossEvent("S1", 1, 0, 20, dr=5))
    assert cmd.dr == 4 and cmd.issued_at == 20 and st.dr["S1"] == 4


def test_aggressive_ignores_stale_losses():
    st = _state()
    st.loss_trigger = 1
    st, cmd = aggressive_update(st, LossEvent("S1", 0, 0, 10, dr=5))
    assert cmd.dr == 4
    st, cmd = aggressive_update(st, LossEvent("S1", 1, 0, 11, dr=5))
    assert cmd is None and st.dr["S1"] == 4


def test_aggressive_floor_and_unknown():
    st = PolicyState("aggressive", {"S1": 0})
    st, cmd = aggressive_update(st, LossEvent("S1", 0, 0, 1, dr=0))
    assert cmd is None and st.dr["S1"] == 0
    with pytest.raises(UnknownSensorError):
        aggressive_update(st, LossEvent("nope", 0, 0, 1))


def test_make_policy():
    assert make_policy("fixed:3").label == "Fixed DR-3"
    assert make_policy("aggressive", loss_trigger=7).loss_trigger == 7
    assert make_policy("conservative", offset=2.0).offset == 2.0
    for bad in ("fixed:9", "greedy"):
        with pytest.raises(ValueError):
            make_policy(bad)
    with pytest.raises(ValueError):
        AggressivePolicy(loss_trigger=0)


def test_policy_state_copy_is_independent():
    st = _state()
    cp = st.copy()
    cp.dr["S1"] = 0
    assert st.dr["S1"] == 5


def test_selective_route():
    assert selective_route(ContextRecord("S1", {"rain": 3.0})) == {LOCAL}
    assert selective_route(ContextRecord("S1", {"position": 1.0})) == {EXTERNAL}
    both = ContextRecord("S1", {"rain": 3.0, "heart_rate": 80.0})
    assert selective_route(both) == {LOCAL, EXTERNAL} and both.relevance == "both"
    with pytest.raises(ValueError):
        selective_route(ContextRecord("S1", {}))


def test_sync_filter_neighbours_and_hint():
    zones = line_topology(4)
    ev = ZoneEvent("e1", "CZ-2", "rain", 40.0)
    assert sync_filter(ev, zones) == {"CZ-1", "CZ-3"}
    hinted = ZoneEvent("e2", "CZ-2", "rain", 40.0, motion_hint="CZ-4")
    assert sync_filter(hinted, zones) == {"CZ-4"}
    with pytest.raises(UnknownZoneError):
        sync_filter(ZoneEvent("e3", "CZ-9", "rain", 1.0), zones)
    with pytest.raises(UnknownZoneError):
        sync_filter(ZoneEvent("e4", "CZ-1", "rain", 1.0, motion_hint="CZ-9"), zones)


def test_zone_network_delivers_to_peers_only():
    net = ZoneNetwork(line_topology(3))
    net.publish(ZoneEvent("e1", "CZ-1", "rain", 10.0))
    assert [len(net.servers[z].inbox) for z in ("CZ-1", "CZ-2", "CZ-3")] == [0, 1, 0]
    dest = net.servers["CZ-1"].ingest(ContextRecord("S1", {"rain": 1.0, "gps": 2.0}))
    assert dest == {LOCAL, EXTERNAL}


def test_zone_event_wire_round_trip():
    ev = ZoneEvent("e7", "CZ-1", "rain", 12.5, (1.5, -2.0), "CZ-2", 30.0)
    assert ZoneEvent.from_line(ev.to_line()) == ev
    with pytest.raises(ValueError):
        ZoneEvent("e", "CZ-1", "rain", -1.0)
    with pytest.raises(ValueError):
        ZoneEvent.from_line("ZONE;too;short")
