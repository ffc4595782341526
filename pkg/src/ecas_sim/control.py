"""Server-side decision logic: DR policies, selective routing, zone sync."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

from .channel import ChannelParams, link_margin
from .phy import RadioConfig
from .sensor import ReconfigCommand, SensorState

FIXED = "fixed"
CONSERVATIVE = "conservative"
AGGRESSIVE = "aggressive"

LOCAL = "local"
EXTERNAL = "external"
ECAS_METRICS = frozenset({"rain", "temperature", "humidity"})

SAFETY_OFFSET = 5.0  # mm/h of rain headroom for the conservative policy


class UnknownSensorError(KeyError):
    pass


class UnknownZoneError(KeyError):
    pass


@dataclass(frozen=True)
class LossEvent:
    """A packet the gateway expected but never saw."""

    sensor_id: str
    seq: int
    expected_at: int
    detected_at: int
    dr: int | None = None


@dataclass
class PolicyState:
    kind: str
    dr: dict[str, int]
    last_rain: dict[str, float] = field(default_factory=dict)
    pending_losses: dict[str, int] = field(default_factory=dict)
    fixed_dr: int | None = None
    loss_trigger: int = 1

    def __post_init__(self) -> None:
        if any(not 0 <= d <= 5 for d in self.dr.values()):
            raise ValueError("per-sensor DR must be in 0..5")

    def copy(self) -> PolicyState:
        return PolicyState(
            self.kind, dict(self.dr), dict(self.last_rain), dict(self.pending_losses), self.fixed_dr, self.loss_trigger
        )


def conservative_select(
    sensor: SensorState,
    observed_rain: float,
    cfg: RadioConfig,
    params: ChannelParams,
    offset: float = SAFETY_OFFSET,
) -> int:
    """Fastest DR whose link survives ``offset`` mm/h more rain than observed; DR0 if none does."""
    return _select(float(sensor.distance), float(observed_rain) + offset, cfg, params)


@lru_cache(maxsize=4096)
def _select(distance: float, rain: float, cfg: RadioConfig, params: ChannelParams) -> int:
    for dr in range(5, -1, -1):
        if link_margin(dr, distance, rain, cfg, params) >= 0:
            return dr
    return 0


def aggressive_update(state: PolicyState, loss: LossEvent) -> tuple[PolicyState, ReconfigCommand | None]:
    """Step the sensor's DR down by one once ``state.loss_trigger`` losses accumulate.

    Losses of packets sent at a DR the server has already replaced are
    ignored: the step for that DR was taken.
    """
    sid = loss.sensor_id
    if sid not in state.dr:
        raise UnknownSensorError(sid)
    current = state.dr[sid]
    if loss.dr is not None and loss.dr != current:
        return state, None
    count = state.pending_losses.get(sid, 0) + 1
    if count < state.loss_trigger:
        state.pending_losses[sid] = count
        return state, None
    state.pending_losses[sid] = 0
    if current == 0:
        return state, None
    state.dr[sid] = current - 1
    return state, ReconfigCommand(sid, dr=current - 1, issued_at=loss.detected_at)


class Policy:
    """Hooks the simulator calls; subclasses own the decision rule."""

    kind = ""
    label = ""

    def init_state(self, sensors: Sequence[SensorState], cfg: RadioConfig, params: ChannelParams) -> PolicyState:
        raise NotImplementedError

    def on_delivery(
        self,
        state: PolicyState,
        sensor: SensorState,
        readings: Mapping[str, float],
        now: int,
        cfg: RadioConfig,
        params: ChannelParams,
    ) -> ReconfigCommand | None:
        return None

    def on_loss(self, state: PolicyState, loss: LossEvent) -> ReconfigCommand | None:
        return None

    def upgrade(self, state: PolicyState, sensor_id: str) -> ReconfigCommand | None:
        """Reserved for raising DR when conditions improve; unused by the built-in policies."""
        return None


class FixedPolicy(Policy):
    kind = FIXED

    def __init__(self, dr: int) -> None:
        if not 0 <= dr <= 5:
            raise ValueError("fixed DR must be in 0..5")
        self.dr = dr
        self.label = f"Fixed DR-{dr}"
        self.name = f"fixed:{dr}"

    def init_state(self, sensors, cfg, params):
        return PolicyState(FIXED, {s.sensor_id: self.dr for s in sensors}, fixed_dr=self.dr)


class ConservativePolicy(Policy):
    kind = CONSERVATIVE
    label = "ECAS-Conservative"
    name = CONSERVATIVE

    def __init__(self, offset: float = SAFETY_OFFSET, initial_rain: float = 0.0) -> None:
        self.offset = offset
        self.initial_rain = initial_rain

    def init_state(self, sensors, cfg, params):
        rain = {s.sensor_id: self.initial_rain for s in sensors}
        drs = {s.sensor_id: conservative_select(s, self.initial_rain, cfg, params, self.offset) for s in sensors}
        return PolicyState(CONSERVATIVE, drs, last_rain=rain)

    def on_delivery(self, state, sensor, readings, now, cfg, params):
        if "rain" not in readings:
            return None
        rain = float(readings["rain"])
        state.last_rain[sensor.sensor_id] = rain
        dr = conservative_select(sensor, rain, cfg, params, self.offset)
        if dr == state.dr[sensor.sensor_id]:
            return None
        state.dr[sensor.sensor_id] = dr
        return ReconfigCommand(sensor.sensor_id, dr=dr, issued_at=now)


class AggressivePolicy(Policy):
    kind = AGGRESSIVE
    label = "ECAS-Aggressive"
    name = AGGRESSIVE

    def __init__(self, loss_trigger: int = 1, start_dr: int = 5) -> None:
        if loss_trigger < 1:
            raise ValueError("loss_trigger must be >= 1")
        self.loss_trigger = loss_trigger
        self.start_dr = start_dr

    def init_state(self, sensors, cfg, params):
        return PolicyState(AGGRESSIVE, {s.sensor_id: self.start_dr for s in sensors}, loss_trigger=self.loss_trigger)

    def on_loss(self, state, loss):
        _, cmd = aggressive_update(state, loss)
        return cmd


def make_policy(name: str, **options) -> Policy:
    """``fixed:<dr>``, ``conservative`` or ``aggressive``."""
    name = name.strip().lower()
    if name.startswith("fixed:"):
        return FixedPolicy(int(name.split(":", 1)[1]))
    if name == CONSERVATIVE:
        return ConservativePolicy(**{k: v for k, v in options.items() if k in ("offset", "initial_rain")})
    if name == AGGRESSIVE:
        return AggressivePolicy(**{k: v for k, v in options.items() if k in ("loss_trigger", "start_dr")})
    raise ValueError(f"unknown policy {name!r}")


# -- selective bridge ----------------------------------------------------------


@dataclass(frozen=True)
class ContextRecord:
    sensor_id: str
    readings: Mapping[str, float]
    kind: str = "Periodic"

    @property
    def relevance(self) -> str:
        dest = selective_route(self)
        return "both" if len(dest) == 2 else ("local-ECAS" if LOCAL in dest else "external-system")


def selective_route(record: ContextRecord) -> frozenset[str]:
    if not record.readings:
        raise ValueError("context record carries no readings")
    metrics = set(record.readings)
    dest = set()
    if metrics & ECAS_METRICS:
        dest.add(LOCAL)
    if metrics - ECAS_METRICS:
        dest.add(EXTERNAL)
    return frozenset(dest)


# -- intelligent sync ----------------------------------------------------------


@dataclass(frozen=True)
class ZoneEvent:
    """Context event shared between zone servers.

    Wire form: ``ZONE;<id>;<source>;<kind>;<value>;<x>;<y>;<target|->;<timestamp>``
    """

    event_id: str
    source_zone: str
    kind: str
    value: float
    location: tuple[float, float] = (0.0, 0.0)
    motion_hint: str | None = None
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.value < 0:
            raise ValueError("zone event value must be >= 0")

    def to_line(self) -> str:
        x, y = self.location
        target = self.motion_hint or "-"
        return f"ZONE;{self.event_id};{self.source_zone};{self.kind};{self.value:g};{x:g};{y:g};{target};{self.timestamp:g}"

    @classmethod
    def from_line(cls, line: str) -> ZoneEvent:
        parts = line.strip().split(";")
        if len(parts) != 9 or parts[0] != "ZONE":
            raise ValueError(f"not a zone event record: {line!r}")
        _, eid, src, kind, value, x, y, target, ts = parts
        return cls(eid, src, kind, float(value), (float(x), float(y)), None if target == "-" else target, float(ts))


ZoneRegistry = Mapping[str, Iterable[str]]


def line_topology(n: int, prefix: str = "CZ-") -> dict[str, set[str]]:
    """Zones CZ-1..CZ-n where each zone borders its numeric neighbours."""
    zones = [f"{prefix}{i}" for i in range(1, n + 1)]
    reg: dict[str, set[str]] = {z: set() for z in zones}
    for a, b in zip(zones, zones[1:]):
        reg[a].add(b)
        reg[b].add(a)
    return reg


def sync_filter(event: ZoneEvent, zones: ZoneRegistry) -> set[str]:
    src = event.source_zone
    if src not in zones:
        raise UnknownZoneError(src)
    if event.motion_hint is not None:
        if event.motion_hint not in zones:
            raise UnknownZoneError(event.motion_hint)
        targets = {event.motion_hint}
    else:
        targets = set(zones[src])
    targets.discard(src)
    return targets


class ZoneServer:
    """One ECAS server: local context store, external stub, peer inbox."""

    def __init__(self, zone: str) -> None:
        self.zone = zone
        self.local: list[ContextRecord] = []
        self.external: list[ContextRecord] = []
        self.inbox: deque[ZoneEvent] = deque()

    def ingest(self, record: ContextRecord) -> frozenset[str]:
        dest = selective_route(record)
        if LOCAL in dest:
            self.local.append(record)
        if EXTERNAL in dest:
            self.external.append(record)
        return dest


class ZoneNetwork:
    """Zone servers exchanging events over reliable, per-sender ordered links."""

    def __init__(self, registry: ZoneRegistry) -> None:
        self.registry = {z: set(peers) for z, peers in registry.items()}
        self.servers = {z: ZoneServer(z) for z in self.registry}

    def publish(self, event: ZoneEvent) -> set[str]:
        targets = sync_filter(event, self.registry)
        for z in sorted(targets):
            self.servers[z].inbox.append(event)
        return targets
