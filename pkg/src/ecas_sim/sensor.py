"""Field-node behaviour: measurement classification, outbox, duty-cycled sends.

All times are integer microseconds from the start of the round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .phy import min_send_interval_us

US = 1_000_000

PERIODIC = "Periodic"
TRIGGER = "Trigger"

MS = "MS"
FOMS = "FOMS"


def to_us(seconds: float) -> int:
    return round(seconds * US)


@dataclass
class Message:
    kind: str
    sensor_id: str
    timestamp: int
    readings: dict[str, float]
    payload_bytes: int
    samples: list[tuple[int, dict[str, float]]] = field(default_factory=list)


@dataclass(frozen=True)
class SendAction:
    sensor_id: str
    time: int


@dataclass(frozen=True)
class ReconfigCommand:
    """Server-to-sensor update; ``None`` fields are left untouched.

    Wire form: ``RECONFIG;<issued_at_us>;<sensor_id>;<dr|->;<metric=limit,...|->``
    """

    sensor_id: str
    dr: int | None = None
    thresholds: Mapping[str, float] | None = None
    issued_at: int = 0

    def to_line(self) -> str:
        dr = "-" if self.dr is None else str(self.dr)
        if self.thresholds is None:
            th = "-"
        else:
            th = ",".join(f"{k}={v:g}" for k, v in sorted(self.thresholds.items()))
        return f"RECONFIG;{self.issued_at};{self.sensor_id};{dr};{th}"

    @classmethod
    def from_line(cls, line: str) -> ReconfigCommand:
        parts = line.strip().split(";")
        if len(parts) != 5 or parts[0] != "RECONFIG":
            raise ValueError(f"not a reconfig record: {line!r}")
        _, issued, sid, dr, th = parts
        thresholds = None
        if th != "-":
            thresholds = {}
            for item in filter(None, th.split(",")):
                k, v = item.split("=")
                thresholds[k] = float(v)
        return cls(sid, None if dr == "-" else int(dr), thresholds, int(issued))


@dataclass
class SensorState:
    sensor_id: str
    distance: float
    current_dr: int = 5
    kind: str = MS
    zone: str = "CZ-1"
    thresholds: dict[str, float] = field(default_factory=dict)
    app_period: int = 60 * US
    payload_bytes: int = 20
    duty_cycle_limit: float = 0.01
    last_tx: int | None = None
    duty_ready: int = 0
    tx_scheduled: int | None = None
    outbox: list[Message] = field(default_factory=list)
    buffer: list[tuple[int, dict[str, float]]] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 <= self.current_dr <= 5:
            raise ValueError("current_dr must be in 0..5")
        if self.app_period <= 0:
            raise ValueError("app_period must be positive")


def classify(readings: Mapping[str, float], thresholds: Mapping[str, float]) -> str:
    """Trigger iff some reading strictly exceeds its limit; unlimited metrics never trigger."""
    if not thresholds:
        return PERIODIC
    for metric, value in readings.items():
        limit = thresholds.get(metric)
        if limit is not None and value > limit:
            return TRIGGER
    return PERIODIC


def _enqueue(state: SensorState, msg: Message) -> None:
    if msg.kind == TRIGGER:
        at = next((i for i, m in enumerate(state.outbox) if m.kind != TRIGGER), len(state.outbox))
        state.outbox.insert(at, msg)
    else:
        state.outbox.append(msg)


def _flush(state: SensorState, now: int) -> None:
    samples = state.buffer
    state.buffer = []
    pending = None
    for m in state.outbox:
        if m.kind == PERIODIC:
            pending = m
            break
    if pending is not None:
        # duty cycle held the previous bulk back; ride along with it
        pending.samples.extend(samples)
        pending.readings = samples[-1][1]
        pending.timestamp = now
        return
    _enqueue(state, Message(PERIODIC, state.sensor_id, now, samples[-1][1], state.payload_bytes, samples))


def on_measurement(state: SensorState, readings: Mapping[str, float], now: int) -> list[SendAction]:
    """Handle one sample; returns at most one new send action (updates ``state`` in place).

    ``readings`` is kept by reference; callers must not mutate it afterwards.
    """
    if classify(readings, state.thresholds) == TRIGGER:
        _enqueue(state, Message(TRIGGER, state.sensor_id, now, dict(readings), state.payload_bytes, [(now, readings)]))
    else:
        state.buffer.append((now, readings))
        if now > 0 and now % state.app_period == 0:
            _flush(state, now)
    if state.outbox and state.tx_scheduled is None:
        state.tx_scheduled = next_tx_time(state, now)
        return [SendAction(state.sensor_id, state.tx_scheduled)]
    return []


def next_tx_time(state: SensorState, now: int) -> int:
    """Earliest time >= ``now`` allowed by the duty budget of the previous send."""
    return max(now, state.duty_ready)


def pop_for_tx(state: SensorState, now: int, toa: int) -> Message:
    """Take the head of the outbox for transmission at ``now`` and charge the duty budget."""
    if not state.outbox:
        raise RuntimeError(f"{state.sensor_id}: transmission slot with empty outbox")
    if now < state.duty_ready:
        raise RuntimeError(f"{state.sensor_id}: transmission at {now} violates duty budget {state.duty_ready}")
    msg = state.outbox.pop(0)
    state.last_tx = now
    state.duty_ready = now + min_send_interval_us(toa, state.duty_cycle_limit, state.app_period)
    state.tx_scheduled = None
    return msg


def apply_reconfig(state: SensorState, command: ReconfigCommand) -> SensorState:
    """Install a new DR and/or thresholds; invalid DRs are rejected and logged.

    The DR is read at the next transmission, so the change lands on the next
    slot. The duty budget is untouched.
    """
    if command.dr is not None:
        if isinstance(command.dr, bool) or not isinstance(command.dr, int) or not 0 <= command.dr <= 5:
            state.errors.append(f"rejected reconfig for {state.sensor_id}: DR {command.dr!r} out of range")
            return state
        state.current_dr = command.dr
    if command.thresholds is not None:
        state.thresholds = dict(command.thresholds)
    return state
