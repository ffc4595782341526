"""Experiment driver: rain sweeps, report files, reference comparison."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .channel import ChannelParams, calibrate, load_milestones, load_params, parse_key_values
from .control import AGGRESSIVE, CONSERVATIVE, FIXED, Policy, PolicyState, make_policy
from .engine import RoundConfig, RoundStats, SensorSeed, run_round
from .phy import RadioConfig, calibrate_payload

log = logging.getLogger(__name__)

ALL_POLICIES = ("fixed:5", "fixed:4", "fixed:3", "fixed:2", "fixed:1", "fixed:0", AGGRESSIVE, CONSERVATIVE)
DEFAULT_SENSORS = (SensorSeed("S1", 2000.0), SensorSeed("S2", 4000.0), SensorSeed("S3", 6000.0))

GRID_5MM = tuple(float(r) for r in range(0, 151, 5))
GRID_1MM = tuple(float(r) for r in range(0, 151))

# Per-sensor, per-round sends implied by the duty-cycle-bound reference totals
# (sent / (31 rounds * 3 sensors)).
DUTY_BOUND_TARGETS = {1: 128_216 / 93, 0: 64_139 / 93}
# Fitted with fit_loss_trigger() against an aggressive aggregate PDR of 85 %.
AGGRESSIVE_LOSS_TRIGGER = 194
TARGET_AGGRESSIVE_PDR = 0.85


class ConfigError(ValueError):
    """Bad experiment, grid, milestone or reference input."""


def data_path(name: str) -> Path:
    return Path(str(resources.files("ecas_sim") / "data" / name))


# -- spec ----------------------------------------------------------------------


@dataclass(frozen=True)
class EffectiveGrid:
    rains: tuple[float, ...]
    label: str
    note: str


@dataclass
class ExperimentSpec:
    grid: str = "5mm"
    sends_per_round: int = 1500
    duration: float = 86400.0
    app_period: float | None = None
    sensors: tuple[SensorSeed, ...] = DEFAULT_SENSORS
    policies: tuple[str, ...] = ALL_POLICIES
    channel_params: str = "calibrate"
    milestones: str | None = None
    coding_rate: int | None = None
    payload_bytes: int | None = None
    aggressive_loss_trigger: int = AGGRESSIVE_LOSS_TRIGGER
    conservative_offset: float = 5.0
    grace: float | None = None
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.policies:
            raise ConfigError("policy list is empty")
        for name in self.policies:
            try:
                make_policy(name)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.sends_per_round <= 0 or self.duration <= 0:
            raise ConfigError("sends_per_round and duration must be positive")

    @property
    def period(self) -> float:
        """Application period; by default chosen so a round holds ``sends_per_round`` slots."""
        return self.app_period if self.app_period is not None else self.duration / self.sends_per_round

    def policy(self, name: str) -> Policy:
        return make_policy(name, loss_trigger=self.aggressive_loss_trigger, offset=self.conservative_offset)


def load_spec(path: str | Path) -> ExperimentSpec:
    """Parse a ``key = value`` experiment file (see README for keys)."""
    path = Path(path)
    try:
        kv = parse_key_values(path.read_text(encoding="utf-8"), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    base = path.parent
    spec = {}
    try:
        for key, value in kv.items():
            if key == "grid":
                spec["grid"] = value if value in ("5mm", "1mm") else str(base / value)
            elif key in ("sends_per_round", "coding_rate", "payload_bytes", "aggressive_loss_trigger", "workers"):
                spec[key] = int(value)
            elif key in ("duration_s", "app_period_s", "conservative_offset_mm_h", "grace_s"):
                name = {"duration_s": "duration", "app_period_s": "app_period",
                        "conservative_offset_mm_h": "conservative_offset", "grace_s": "grace"}[key]
                spec[name] = float(value)
            elif key == "sensors":
                spec["sensors"] = tuple(_parse_sensor(item) for item in value.split(",") if item.strip())
            elif key == "policies":
                spec["policies"] = _parse_policies(value)
            elif key == "channel_params":
                spec[key] = value if value == "calibrate" else str(base / value)
            elif key == "milestones":
                spec[key] = str(base / value)
            elif key == "output_dir":
                spec[key] = value
            else:
                raise ConfigError(f"{path}: unknown key {key!r}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None
    return ExperimentSpec(**spec)


def _parse_sensor(item: str) -> SensorSeed:
    sid, _, dist = item.strip().partition(":")
    if not dist:
        raise ConfigError(f"sensor entry {item!r} must look like ID:distance_m")
    return SensorSeed(sid.strip(), float(dist))


def _parse_policies(value: str) -> tuple[str, ...]:
    names: list[str] = []
    for item in value.split(","):
        item = item.strip().lower()
        if not item:
            continue
        names.extend(ALL_POLICIES if item == "all" else [item])
    return tuple(dict.fromkeys(names))


def reconcile_rounds(spec: ExperimentSpec) -> EffectiveGrid:
    if spec.grid == "5mm":
        return EffectiveGrid(
            GRID_5MM, "5mm",
            "31 rounds, 0..150 mm/h in 5 mm/h steps: the grid whose totals match the reference tables "
            "(139,500 sent = 1,500 x 3 sensors x 31 rounds)",
        )
    if spec.grid == "1mm":
        return EffectiveGrid(GRID_1MM, "1mm", "151 rounds, 0..150 mm/h in 1 mm/h steps (opt-in fine grid)")
    return EffectiveGrid(read_grid(spec.grid), f"file:{spec.grid}", f"custom grid read from {spec.grid}")


def read_grid(path: str | Path) -> tuple[float, ...]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read grid file {path}: {exc.strerror}") from None
    values = []
    for token in text.replace(",", " ").split():
        if token.startswith("#"):
            break
        try:
            values.append(float(token))
        except ValueError:
            raise ConfigError(f"{path}: {token!r} is not a rain rate") from None
    if not values:
        raise ConfigError(f"{path}: grid is empty")
    if any(b < a for a, b in zip(values, values[1:])):
        raise ConfigError(f"{path}: grid must be nondecreasing")
    return tuple(values)


def resolve_radio(spec: ExperimentSpec) -> RadioConfig:
    if spec.coding_rate is not None and spec.payload_bytes is not None:
        return RadioConfig(coding_rate=spec.coding_rate, payload_bytes=spec.payload_bytes)
    fitted = calibrate_payload(DUTY_BOUND_TARGETS, duration=spec.duration, app_period=spec.period)
    return replace(
        fitted,
        coding_rate=spec.coding_rate or fitted.coding_rate,
        payload_bytes=spec.payload_bytes or fitted.payload_bytes,
    )


def resolve_params(spec: ExperimentSpec, radio: RadioConfig) -> ChannelParams:
    if spec.channel_params != "calibrate":
        try:
            return load_params(spec.channel_params)
        except OSError as exc:
            raise ConfigError(f"cannot read channel params {spec.channel_params}: {exc.strerror}") from None
    milestones = load_milestones(spec.milestones or data_path("milestones.csv"))
    return calibrate(milestones, radio)


# -- sweeps --------------------------------------------------------------------


@dataclass(frozen=True)
class Aggregate:
    sent: int
    received: int

    @property
    def lost(self) -> int:
        return self.sent - self.received

    @property
    def pdr(self) -> float:
        return self.received / self.sent if self.sent else 0.0

    @property
    def pdr_percent(self) -> int:
        return math.floor(100.0 * self.pdr + 0.5)


@dataclass
class PolicyRun:
    name: str
    label: str
    kind: str
    rounds: list[RoundStats]

    @property
    def aggregate(self) -> Aggregate:
        return Aggregate(sum(r.sent for r in self.rounds), sum(r.received for r in self.rounds))


@dataclass
class SweepResult:
    runs: dict[str, PolicyRun]
    grid: EffectiveGrid
    spec: ExperimentSpec
    radio: RadioConfig
    params: ChannelParams
    traces: dict[str, list] = field(default_factory=dict)

    def aggregates(self) -> dict[str, Aggregate]:
        return {run.label: run.aggregate for run in self.runs.values()}


def round_config(spec: ExperimentSpec, policy: Policy, rain: float, index: int, radio: RadioConfig,
                 params: ChannelParams) -> RoundConfig:
    return RoundConfig(
        rain=rain,
        sensors=spec.sensors,
        channel_params=params,
        radio=radio,
        policy=policy,
        duration=spec.duration,
        app_period=spec.period,
        grace=spec.grace,
        round_index=index,
    )


def _independent_round(cfg: RoundConfig) -> RoundStats:
    return run_round(cfg)[0]


def run_policy(
    spec: ExperimentSpec,
    name: str,
    grid: Sequence[float],
    radio: RadioConfig,
    params: ChannelParams,
    trace: bool = False,
) -> tuple[PolicyRun, list]:
    from .engine import Engine, start_state

    policy = spec.policy(name)
    cfgs = [round_config(spec, policy, rain, i, radio, params) for i, rain in enumerate(grid)]
    traced = []
    if policy.kind == FIXED and not trace and spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            rounds = list(pool.map(_independent_round, cfgs))
        return PolicyRun(name, policy.label, policy.kind, rounds), traced
    rounds = []
    carry: PolicyState | None = None
    for cfg in cfgs:
        # fixed rounds are independent; adaptive ones carry the policy state forward
        engine = Engine(cfg, start_state(cfg, None if policy.kind == FIXED else carry), trace=trace)
        rounds.append(engine.run())
        carry = engine.state
        if trace:
            traced.append((cfg.round_index, cfg.rain, engine.trace, engine.messages))
    return PolicyRun(name, policy.label, policy.kind, rounds), traced


def run_sweep(
    spec: ExperimentSpec,
    params: ChannelParams | None = None,
    radio: RadioConfig | None = None,
    trace: bool = False,
) -> SweepResult:
    grid = reconcile_rounds(spec)
    radio = radio or resolve_radio(spec)
    params = params or resolve_params(spec, radio)
    runs: dict[str, PolicyRun] = {}
    traces: dict[str, list] = {}
    for name in spec.policies:
        run, traced = run_policy(spec, name, grid.rains, radio, params, trace)
        log.info("%s: sent=%d received=%d", run.label, run.aggregate.sent, run.aggregate.received)
        runs[name] = run
        if trace:
            traces[name] = traced
    return SweepResult(runs, grid, spec, radio, params, traces)


def fit_loss_trigger(
    spec: ExperimentSpec,
    target_pdr: float = TARGET_AGGRESSIVE_PDR,
    params: ChannelParams | None = None,
    radio: RadioConfig | None = None,
    upper: int = 1024,
) -> int:
    """Smallest-error aggressive loss trigger for ``target_pdr`` (PDR falls as the trigger grows)."""
    grid = reconcile_rounds(spec).rains
    radio = radio or resolve_radio(spec)
    params = params or resolve_params(spec, radio)

    def pdr(k: int) -> float:
        run, _ = run_policy(replace(spec, aggressive_loss_trigger=k), AGGRESSIVE, grid, radio, params)
        return run.aggregate.pdr

    lo, hi = 1, upper
    if pdr(lo) <= target_pdr:
        return lo
    if pdr(hi) >= target_pdr:
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if pdr(mid) > target_pdr:
            lo = mid
        else:
            hi = mid
    return lo if abs(pdr(lo) - target_pdr) <= abs(pdr(hi) - target_pdr) else hi


# -- reports -------------------------------------------------------------------


def best_fixed(result: SweepResult) -> PolicyRun | None:
    fixed = [r for r in result.runs.values() if r.kind == FIXED]
    return max(fixed, key=lambda r: (r.aggregate.received, r.name), default=None)


def best_adaptive(result: SweepResult) -> PolicyRun | None:
    adaptive = [r for r in result.runs.values() if r.kind != FIXED]
    return max(adaptive, key=lambda r: (r.aggregate.received, r.name), default=None)


@dataclass(frozen=True)
class Deltas:
    best_fixed: str
    best_adaptive: str
    delivered_gain: float
    sent_reduction: float


def improvement(result: SweepResult) -> Deltas | None:
    fixed, adaptive = best_fixed(result), best_adaptive(result)
    if fixed is None or adaptive is None:
        return None
    f, a = fixed.aggregate, adaptive.aggregate
    return Deltas(fixed.label, adaptive.label, a.received / f.received - 1.0, 1.0 - a.sent / f.sent)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def header_note(result: SweepResult) -> str:
    spec, radio, p = result.spec, result.radio, result.params
    lines = [
        f"grid: {result.grid.label} ({result.grid.note})",
        f"round: {spec.duration:g} s, application period {spec.period:g} s "
        f"({spec.duration / spec.period:g} periodic slots per sensor)",
        f"radio: CR 4/{radio.coding_rate}, payload {radio.payload_bytes} B, preamble {radio.preamble_symbols}, "
        f"tx {radio.tx_power:g} dBm, duty cycle {radio.duty_cycle_limit:g}",
        f"channel: exponent {p.exponent:g}, rain_k {p.rain_k:g}, rain_alpha {p.rain_alpha:g}, "
        f"sensitivities DR0..DR5 {', '.join(f'{s:g}' for s in p.sensitivity_table)} dBm",
        f"aggressive loss trigger: {spec.aggressive_loss_trigger}; conservative offset: {spec.conservative_offset:g} mm/h",
    ]
    return "\n".join(lines)


def emit_reports(result: SweepResult, out_dir: str | Path, svg: bool = True) -> list[Path]:
    if not result.runs:
        raise ValueError("sweep result holds no policy runs")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc.strerror}") from exc
    runs = list(result.runs.values())
    files: dict[str, str] = {}

    fixed = sorted((r for r in runs if r.kind == FIXED), key=lambda r: -int(r.name.split(":")[1]))
    files["table2.csv"] = _csv_text(
        ["dr", "sent", "received", "lost", "pdr_percent"],
        [[r.name.split(":")[1], r.aggregate.sent, r.aggregate.received, r.aggregate.lost, r.aggregate.pdr_percent]
         for r in fixed],
    )
    ordered = fixed + [r for r in runs if r.kind == AGGRESSIVE] + [r for r in runs if r.kind == CONSERVATIVE]
    files["table3.csv"] = _csv_text(
        ["approach", "sent", "pdr_percent"], [[r.label, r.aggregate.sent, r.aggregate.pdr_percent] for r in ordered]
    )
    files["summary.csv"] = _csv_text(
        ["approach", "sent", "received", "lost", "pdr"],
        [[r.label, r.aggregate.sent, r.aggregate.received, r.aggregate.lost, f"{r.aggregate.pdr:.6f}"]
         for r in ordered],
    )
    rains = [s.rain for s in runs[0].rounds]
    files["figure_delivered_per_round.csv"] = _csv_text(
        ["rain_mm_h"] + [r.label for r in ordered],
        [[f"{rain:g}"] + [r.rounds[i].received for r in ordered] for i, rain in enumerate(rains)],
    )
    sensor_ids = [s.sensor_id for s in result.spec.sensors]
    header = ["approach", "round", "rain_mm_h"]
    for sid in sensor_ids:
        header += [f"{sid}_sent", f"{sid}_received", f"{sid}_final_dr"]
    header += ["sent", "received", "lost", "pdr"]
    rows = []
    for r in ordered:
        for st in r.rounds:
            row = [r.label, st.round_index, f"{st.rain:g}"]
            for sid in sensor_ids:
                ps = st.per_sensor[sid]
                row += [ps.sent, ps.received, ps.final_dr]
            row += [st.sent, st.received, st.lost, f"{st.pdr:.6f}"]
            rows.append(row)
    files["rounds.csv"] = _csv_text(header, rows)
    files["comparison.txt"] = comparison_text(result)
    if svg:
        from .svg import bar_chart, line_chart

        files["figure_delivered_per_round.svg"] = line_chart(
            rains, {r.label: [s.received for s in r.rounds] for r in ordered},
            title="Delivered packets per round", x_label="rain (mm/h)", y_label="received packets",
        )
        files["figure_total_packets.svg"] = bar_chart(
            [r.label for r in ordered],
            {"sent": [r.aggregate.sent for r in ordered], "received": [r.aggregate.received for r in ordered]},
            title="Total packets sent and received per approach",
        )
    written = []
    for name, text in files.items():
        path = out / name
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror}") from exc
        written.append(path)
    if result.traces:
        written += write_traces(result, out / "traces")
    return written


def comparison_text(result: SweepResult) -> str:
    lines = [header_note(result), ""]
    for run in result.runs.values():
        a = run.aggregate
        lines.append(f"{run.label:<18} sent {a.sent:>7}  received {a.received:>7}  PDR {100 * a.pdr:6.2f} %")
    deltas = improvement(result)
    lines.append("")
    if deltas is None:
        lines.append("adaptive vs fixed: needs at least one fixed and one adaptive policy")
    else:
        lines.append(f"best fixed (most delivered): {deltas.best_fixed}")
        lines.append(f"best adaptive (most delivered): {deltas.best_adaptive}")
        lines.append(f"delivered increase: {100 * deltas.delivered_gain:+.2f} %")
        lines.append(f"sent reduction: {100 * deltas.sent_reduction:.2f} %")
    return "\n".join(lines) + "\n"


def write_traces(result: SweepResult, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rounds in result.traces.items():
        tag = name.replace(":", "")
        events = out / f"events_{tag}.csv"
        messages = out / f"messages_{tag}.csv"
        with events.open("w", newline="", encoding="utf-8") as fe, messages.open("w", newline="", encoding="utf-8") as fm:
            we = csv.writer(fe, lineterminator="\n")
            wm = csv.writer(fm, lineterminator="\n")
            we.writerow(["round", "time_s", "kind", "subject", "detail"])
            wm.writerow(["round", "time_s", "sensor_id", "kind", "dr", "received"])
            for index, _rain, events_, messages_ in rounds:
                for ev in events_:
                    we.writerow([index, f"{ev.time:.6f}", ev.kind, ev.subject, _detail(ev)])
                for t, sid, kind, dr, ok in messages_:
                    wm.writerow([index, f"{t:.6f}", sid, kind, dr, int(ok)])
        written += [events, messages]
    return written


def _detail(ev) -> str:
    p = ev.payload
    if ev.kind == "tx-end":
        return f"seq={p[0]} dr={p[1]}"
    if ev.kind == "loss-detect":
        return f"seq={p.seq} dr={p.dr}"
    if ev.kind == "reconfig-delivery":
        return p.to_line()
    if ev.kind == "measurement-tick":
        return f"slot={p}"
    return ""


# -- reference comparison ---------------------------------------------------------


@dataclass(frozen=True)
class CellCheck:
    approach: str
    column: str
    expected: float
    actual: float | None
    tolerance: str
    passed: bool


@dataclass
class ComparisonReport:
    checks: list[CellCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[CellCheck]:
        return [c for c in self.checks if not c.passed]

    def render(self) -> str:
        lines = []
        for c in self.checks:
            actual = "missing" if c.actual is None else f"{c.actual:g}"
            lines.append(
                f"{'PASS' if c.passed else 'FAIL'}  {c.approach:<18} {c.column:<12} "
                f"expected {c.expected:g}  actual {actual}  ({c.tolerance})"
            )
        lines.append(f"{len(self.checks) - len(self.failures)}/{len(self.checks)} cells within tolerance")
        return "\n".join(lines) + "\n"


def _exact_sent(approach: str) -> bool:
    return approach in ("Fixed DR-5", "Fixed DR-4", "Fixed DR-3", "Fixed DR-2")


def check_cell(approach: str, column: str, expected: float, actual: float | None) -> CellCheck:
    """Tolerances: exact sent/received for DR5..DR2 fixed runs, +-2 % for other counts,
    +-1 pp PDR for fixed runs and +-2 pp for adaptive ones."""
    fixed = approach.startswith("Fixed")
    if column in ("sent", "received"):
        if _exact_sent(approach):
            tol, ok = "exact", actual is not None and actual == expected
        else:
            tol = "+-2 %"
            ok = actual is not None and abs(actual - expected) <= 0.02 * abs(expected)
    elif column == "pdr_percent":
        pp = 1.0 if fixed else 2.0
        tol = f"+-{pp:g} pp"
        ok = actual is not None and abs(actual - expected) <= pp + 1e-9
    else:
        raise ConfigError(f"unknown reference column {column!r}")
    return CellCheck(approach, column, expected, actual, tol, ok)


def read_reference(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read reference {path}: {exc.strerror}") from None
    rows = list(csv.DictReader(line for line in io.StringIO(text) if not line.lstrip().startswith("#")))
    if not rows or "approach" not in rows[0]:
        raise ConfigError(f"{path}: reference needs an 'approach' column and at least one row")
    for row in rows:
        for col, value in row.items():
            if col is None or value is None:
                raise ConfigError(f"{path}: ragged row {row}")
            if col in ("sent", "received", "pdr_percent") and value.strip():
                try:
                    float(value)
                except ValueError:
                    raise ConfigError(f"{path}: {col}={value!r} is not a number") from None
    return rows


def compare_to_reference(actual: dict[str, Aggregate], reference: str | Path) -> ComparisonReport:
    """Check every filled cell of the reference CSV (approach,sent,received,pdr_percent)."""
    checks = []
    for row in read_reference(reference):
        approach = row["approach"].strip()
        got = actual.get(approach)
        for column in ("sent", "received", "pdr_percent"):
            raw = (row.get(column) or "").strip()
            if not raw:
                continue
            value = None
            if got is not None:
                value = {"sent": got.sent, "received": got.received, "pdr_percent": 100.0 * got.pdr}[column]
            checks.append(check_cell(approach, column, float(raw), value))
    return ComparisonReport(checks)


def read_summary(result_dir: str | Path) -> dict[str, Aggregate]:
    path = Path(result_dir) / "summary.csv"
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            return {row["approach"]: Aggregate(int(row["sent"]), int(row["received"])) for row in csv.DictReader(fh)}
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed summary ({exc})") from None
