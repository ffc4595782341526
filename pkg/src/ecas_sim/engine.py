"""Deterministic discrete-event engine for one rain round.

Event times are integer microseconds. Equal-time events are ordered by kind
priority, then subject id, then insertion order.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .channel import ChannelParams, link_margin
from .control import LossEvent, Policy, PolicyState
from .phy import RadioConfig, dr_profile, time_on_air_us
from .sensor import (
    MS,
    US,
    SensorState,
    apply_reconfig,
    next_tx_time,
    on_measurement,
    pop_for_tx,
    to_us,
)

TX_END = "tx-end"
TX_START = "tx-start"
TICK = "measurement-tick"
LOSS_DETECT = "loss-detect"
RECONFIG = "reconfig-delivery"
ROUND_END = "round-end"

KIND_PRIORITY = {TX_END: 0, TX_START: 1, TICK: 2, LOSS_DETECT: 3, RECONFIG: 4, ROUND_END: 5}

GATEWAY_CHANNELS = 3


@dataclass(frozen=True)
class SimEvent:
    time_us: int
    kind: str
    subject: str
    payload: Any = None

    @property
    def time(self) -> float:
        return self.time_us / US


@dataclass(frozen=True)
class SensorSeed:
    sensor_id: str
    distance: float
    kind: str = MS
    zone: str = "CZ-1"
    thresholds: Mapping[str, float] = field(default_factory=dict)
    height: float = 1.7


@dataclass
class RoundConfig:
    rain: float
    sensors: Sequence[SensorSeed]
    channel_params: ChannelParams
    radio: RadioConfig
    policy: Policy
    duration: float = 86400.0
    app_period: float = 60.0
    grace: float | None = None
    round_index: int = 0
    gateway_height: float = 15.0
    channels: int = GATEWAY_CHANNELS

    def __post_init__(self) -> None:
        if not 0.0 <= self.rain <= 150.0:
            raise ValueError("rain must be within [0, 150] mm/h")
        if len(self.sensors) > self.channels:
            raise ValueError(f"{len(self.sensors)} sensors but only {self.channels} gateway channels")
        ids = [s.sensor_id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise ValueError("sensor ids must be unique")
        if self.duration < 0 or self.app_period <= 0:
            raise ValueError("duration must be >= 0 and app_period > 0")


@dataclass
class SensorRoundStats:
    sent: int = 0
    received: int = 0
    lost: int = 0
    final_dr: int = 5


@dataclass
class RoundStats:
    round_index: int
    rain: float
    per_sensor: dict[str, SensorRoundStats]

    @property
    def sent(self) -> int:
        return sum(s.sent for s in self.per_sensor.values())

    @property
    def received(self) -> int:
        return sum(s.received for s in self.per_sensor.values())

    @property
    def lost(self) -> int:
        return sum(s.lost for s in self.per_sensor.values())

    @property
    def pdr(self) -> float:
        return self.received / self.sent if self.sent else 0.0


@dataclass(frozen=True)
class ExpectedPacket:
    sensor_id: str
    seq: int
    arrival: int
    dr: int | None = None


def detect_losses(
    expected_schedule: Iterable[ExpectedPacket],
    received_log: Iterable[tuple[str, int]],
    grace: int,
) -> list[LossEvent]:
    """One loss per expected-but-missing packet, stamped ``grace`` after its expected arrival."""
    got = set(received_log)
    losses = [
        LossEvent(p.sensor_id, p.seq, p.arrival, p.arrival + grace, p.dr)
        for p in expected_schedule
        if (p.sensor_id, p.seq) not in got
    ]
    losses.sort(key=lambda e: (e.detected_at, e.sensor_id, e.seq))
    return losses


class Engine:
    def __init__(self, cfg: RoundConfig, state: PolicyState, trace: bool = False) -> None:
        self.cfg = cfg
        self.state = state
        self.trace_enabled = trace
        self.trace: list[SimEvent] = []
        self.messages: list[tuple[float, str, str, int, bool]] = []
        self.losses: list[LossEvent] = []
        self.commands = []
        self.finished = False

        self._queue: list = []
        self._seq = 0
        self._period = to_us(cfg.app_period)
        self._duration = to_us(cfg.duration)
        self._grace = self._period if cfg.grace is None else to_us(cfg.grace)
        self._toa = [time_on_air_us(dr_profile(dr), cfg.radio) for dr in range(6)]
        self._link: dict[tuple[int, float], bool] = {}
        self._tx_seq: dict[str, int] = {}
        self._readings = {"rain": cfg.rain}
        self._handlers = {
            TX_END: self._on_tx_end,
            TX_START: self._on_tx_start,
            TICK: self._on_tick,
            LOSS_DETECT: self._on_loss,
            RECONFIG: self._on_reconfig,
            ROUND_END: self._on_round_end,
        }

        self.sensors: dict[str, SensorState] = {}
        self.stats: dict[str, SensorRoundStats] = {}
        for seed in sorted(cfg.sensors, key=lambda s: s.sensor_id):
            sid = seed.sensor_id
            self.sensors[sid] = SensorState(
                sensor_id=sid,
                distance=seed.distance,
                current_dr=state.dr[sid],
                kind=seed.kind,
                zone=seed.zone,
                thresholds=dict(seed.thresholds),
                app_period=self._period,
                payload_bytes=cfg.radio.payload_bytes,
                duty_cycle_limit=cfg.radio.duty_cycle_limit,
            )
            self.stats[sid] = SensorRoundStats(final_dr=state.dr[sid])
            self._tx_seq[sid] = 0
            self._push(0, TICK, sid, 0)
        self._push(self._duration, ROUND_END, "", None)

    def _push(self, t: int, kind: str, subject: str, payload: Any) -> None:
        if self.finished:
            return
        self._seq += 1
        heapq.heappush(self._queue, (t, KIND_PRIORITY[kind], subject, self._seq, kind, payload))

    def _connected(self, dr: int, distance: float) -> bool:
        key = (dr, distance)
        ok = self._link.get(key)
        if ok is None:
            ok = link_margin(dr, distance, self.cfg.rain, self.cfg.radio, self.cfg.channel_params) >= 0
            self._link[key] = ok
        return ok

    def step(self) -> SimEvent | None:
        """Process the earliest event and return it; None once the round is over."""
        if self.finished or not self._queue:
            return None
        t, _, subject, _, kind, payload = heapq.heappop(self._queue)
        event = SimEvent(t, kind, subject, payload)
        if self.trace_enabled:
            self.trace.append(event)
        self._handlers[kind](t, subject, payload)
        return event

    def run(self) -> RoundStats:
        queue = self._queue
        pop = heapq.heappop
        handlers = self._handlers
        trace = self.trace if self.trace_enabled else None
        while queue and not self.finished:
            t, _, subject, _, kind, payload = pop(queue)
            if trace is not None:
                trace.append(SimEvent(t, kind, subject, payload))
            handlers[kind](t, subject, payload)
        return self.round_stats()

    def round_stats(self) -> RoundStats:
        for sid, st in self.sensors.items():
            self.stats[sid].final_dr = st.current_dr
        return RoundStats(self.cfg.round_index, self.cfg.rain, self.stats)

    def _on_tick(self, t: int, sid: str, k: int) -> None:
        sensor = self.sensors[sid]
        for action in on_measurement(sensor, self._readings, t):
            self._push(action.time, TX_START, sid, None)
        nxt = (k + 1) * self._period
        if nxt <= self._duration:
            self._push(nxt, TICK, sid, k + 1)

    def _on_tx_start(self, t: int, sid: str, _payload: Any) -> None:
        sensor = self.sensors[sid]
        dr = sensor.current_dr
        toa = self._toa[dr]
        msg = pop_for_tx(sensor, t, toa)
        seq = self._tx_seq[sid]
        self._tx_seq[sid] = seq + 1
        self.stats[sid].sent += 1
        self._push(t + toa, TX_END, sid, (seq, dr, msg))
        if sensor.outbox:
            sensor.tx_scheduled = next_tx_time(sensor, t)
            self._push(sensor.tx_scheduled, TX_START, sid, None)

    def _on_tx_end(self, t: int, sid: str, payload: tuple) -> None:
        seq, dr, msg = payload
        sensor = self.sensors[sid]
        ok = self._connected(dr, sensor.distance)
        if self.trace_enabled:
            self.messages.append((t / US, sid, msg.kind, dr, ok))
        if ok:
            self.stats[sid].received += 1
            cmd = self.cfg.policy.on_delivery(self.state, sensor, msg.readings, t, self.cfg.radio, self.cfg.channel_params)
            if cmd is not None:
                self._push(t, RECONFIG, sid, cmd)
        else:
            self.stats[sid].lost += 1
            loss = LossEvent(sid, seq, t, t + self._grace, dr)
            self._push(loss.detected_at, LOSS_DETECT, sid, loss)

    def _on_loss(self, t: int, sid: str, loss: LossEvent) -> None:
        self.losses.append(loss)
        cmd = self.cfg.policy.on_loss(self.state, loss)
        if cmd is not None:
            self._push(t, RECONFIG, cmd.sensor_id, cmd)

    def _on_reconfig(self, t: int, sid: str, cmd) -> None:
        apply_reconfig(self.sensors[sid], cmd)
        self.commands.append(cmd)

    def _on_round_end(self, t: int, sid: str, _payload: Any) -> None:
        # transmissions already on air still land in this round
        pending = sorted(e for e in self._queue if e[4] == TX_END)
        self._queue.clear()
        self.finished = True
        for t_end, _, subject, _, kind, payload in pending:
            if self.trace_enabled:
                self.trace.append(SimEvent(t_end, kind, subject, payload))
            self._on_tx_end(t_end, subject, payload)


def run_round(cfg: RoundConfig, carry: PolicyState | None = None) -> tuple[RoundStats, PolicyState]:
    """Run one round; the carried policy state is copied, never mutated."""
    engine = Engine(cfg, start_state(cfg, carry))
    return engine.run(), engine.state


def start_state(cfg: RoundConfig, carry: PolicyState | None) -> PolicyState:
    state = cfg.policy.init_state(_seed_states(cfg), cfg.radio, cfg.channel_params) if carry is None else carry.copy()
    if state.kind != cfg.policy.kind:
        raise ValueError(f"carried {state.kind} state does not match {cfg.policy.kind} policy")
    return state


def _seed_states(cfg: RoundConfig) -> list[SensorState]:
    return [SensorState(s.sensor_id, s.distance, kind=s.kind, zone=s.zone) for s in cfg.sensors]
