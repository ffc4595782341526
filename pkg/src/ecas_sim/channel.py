"""Link budget: log-distance path loss, power-law rain attenuation, calibration."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .phy import DATASHEET_SENSITIVITY_DBM, RadioConfig, dr_profile, sensitivity

NEVER_CONNECTED = "never-connected"
BEYOND_SWEEP = "beyond-sweep"

Breakpoint = Union[float, str]

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_SWEEP = tuple(float(r) for r in range(0, 151, 5))


class CalibrationError(RuntimeError):
    """No parameter set on the search grid reproduces every milestone."""

    def __init__(self, message: str, violated: Sequence[LinkMilestone] = ()) -> None:
        super().__init__(message)
        self.violated = list(violated)


def free_space_loss(distance: float, carrier: float) -> float:
    return 20.0 * math.log10(4.0 * math.pi * distance * carrier / SPEED_OF_LIGHT)


@dataclass(frozen=True)
class ChannelParams:
    pl0: float = field(default_factory=lambda: round(free_space_loss(1.0, 868e6), 6))
    d0: float = 1.0
    exponent: float = 3.0
    rain_k: float = 0.0155
    rain_alpha: float = 1.0
    sensitivity_table: tuple[float, ...] = DATASHEET_SENSITIVITY_DBM
    antenna_gains: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "sensitivity_table", tuple(float(s) for s in self.sensitivity_table))
        if self.d0 <= 0:
            raise ValueError("d0 must be positive")
        if self.exponent < 2.0:
            raise ValueError("path-loss exponent must be >= 2")
        if self.rain_k < 0:
            raise ValueError("rain_k must be >= 0")
        if self.rain_alpha <= 0:
            raise ValueError("rain_alpha must be positive")
        table = self.sensitivity_table
        if len(table) != 6:
            raise ValueError("sensitivity_table needs one entry per DR0..DR5")
        if any(a >= b for a, b in zip(table, table[1:])):
            raise ValueError("sensitivity must strictly decrease from DR5 to DR0")


@dataclass(frozen=True)
class LinkMilestone:
    """Observed connectivity of one (DR, distance) link over the rain sweep.

    ``max_connected_rain`` is the last rain rate (mm/h) that still delivers,
    or NEVER_CONNECTED / BEYOND_SWEEP.
    """

    dr_index: int
    distance: float
    max_connected_rain: Breakpoint
    source: str = ""

    def __post_init__(self) -> None:
        dr_profile(self.dr_index)
        b = self.max_connected_rain
        if isinstance(b, str):
            if b not in (NEVER_CONNECTED, BEYOND_SWEEP):
                raise ValueError(f"unknown breakpoint label {b!r}")
        elif not 0.0 <= b <= 150.0:
            raise ValueError("breakpoint rain must be within [0, 150] mm/h")


def path_loss(distance: float, params: ChannelParams) -> float:
    if distance < params.d0:
        raise ValueError(f"distance {distance} m is below the reference distance {params.d0} m")
    return params.pl0 + 10.0 * params.exponent * math.log10(distance / params.d0)


def rain_attenuation(rain: float, distance: float, params: ChannelParams) -> float:
    if rain < 0:
        raise ValueError("rain rate must be >= 0")
    if rain == 0:
        return 0.0
    return params.rain_k * rain**params.rain_alpha * (distance / 1000.0)


def link_margin(dr_index: int, distance: float, rain: float, cfg: RadioConfig, params: ChannelParams) -> float:
    floor = sensitivity(dr_profile(dr_index), params)
    rx = cfg.tx_power + params.antenna_gains - path_loss(distance, params) - rain_attenuation(rain, distance, params)
    return rx - floor


def breakpoint_rain(
    dr_index: int,
    distance: float,
    cfg: RadioConfig,
    params: ChannelParams,
    grid: Sequence[float] = DEFAULT_SWEEP,
) -> Breakpoint:
    last = None
    for rain in grid:
        if link_margin(dr_index, distance, rain, cfg, params) < 0:
            break
        last = rain
    else:
        return BEYOND_SWEEP
    return NEVER_CONNECTED if last is None else last


# -- calibration -------------------------------------------------------------

_EXPONENTS = np.arange(200, 401, 5) / 100.0
_ALPHAS = np.arange(50, 151, 5) / 100.0
_RAIN_KS = np.arange(1, 1001) / 10_000.0
_OPEN_SLACK = 3.0  # dB kept from a one-sided sensitivity bound


@dataclass(frozen=True)
class _Bound:
    dr: int
    distance: float
    rain: float
    upper: bool  # True: sensitivity <= budget at rain; False: sensitivity > budget
    milestone: LinkMilestone


def _bounds(milestones: Iterable[LinkMilestone], grid: Sequence[float]) -> list[_Bound]:
    out = []
    for m in milestones:
        b = m.max_connected_rain
        if b == NEVER_CONNECTED:
            out.append(_Bound(m.dr_index, m.distance, grid[0], False, m))
        elif b == BEYOND_SWEEP:
            out.append(_Bound(m.dr_index, m.distance, grid[-1], True, m))
        else:
            out.append(_Bound(m.dr_index, m.distance, float(b), True, m))
            later = [r for r in grid if r > b]
            if later:
                out.append(_Bound(m.dr_index, m.distance, later[0], False, m))
    return out


def _contradictions(milestones: Sequence[LinkMilestone]) -> list[LinkMilestone]:
    seen: dict[tuple[int, float], set] = defaultdict(set)
    for m in milestones:
        seen[(m.dr_index, float(m.distance))].add(m.max_connected_rain)
    return [m for m in milestones if len(seen[(m.dr_index, float(m.distance))]) > 1]


def calibrate(
    milestones: Sequence[LinkMilestone],
    cfg: RadioConfig,
    base: ChannelParams | None = None,
    grid: Sequence[float] = DEFAULT_SWEEP,
    sensitivity_band: tuple[float, float] = (-140.0, -120.0),
) -> ChannelParams:
    """Fit exponent, rain law and sensitivities so every milestone is reproduced.

    The search walks an (exponent, rain_alpha, rain_k) grid. For each point the
    milestones reduce to an interval per DR on the sensitivity value, which is
    set to the interval midpoint. Among candidates that reproduce everything,
    the one with the widest minimum interval wins (ties: lexicographically
    smallest grid point), so the committed parameters do not sit on a
    feasibility edge.
    """
    base = base or ChannelParams()
    milestones = list(milestones)
    if not milestones:
        return base
    clash = _contradictions(milestones)
    if clash:
        raise CalibrationError("milestones demand incompatible breakpoints for the same link", clash)

    bounds = _bounds(milestones, grid)
    offset = cfg.tx_power + base.antenna_gains - base.pl0
    log_d = np.array([math.log10(b.distance / base.d0) for b in bounds])
    km = np.array([b.distance / 1000.0 for b in bounds])
    rains = np.array([b.rain for b in bounds])
    upper = np.array([b.upper for b in bounds])
    drs = np.array([b.dr for b in bounds])
    ks = _RAIN_KS
    band_lo, band_hi = sensitivity_band

    best_key = None
    best = None
    best_partial = (-1, None)
    for n in _EXPONENTS:
        budget0 = offset - 10.0 * n * log_d  # per bound, no rain
        for alpha in _ALPHAS:
            with np.errstate(divide="ignore"):
                rain_term = np.where(rains > 0, rains**alpha, 0.0) * km
            # budget[b, k]: sensitivity value at which bound b sits on the margin edge
            budget = budget0[:, None] - rain_term[:, None] * ks[None, :]
            lo = np.full((6, ks.size), -np.inf)
            hi = np.full((6, ks.size), np.inf)
            for i in range(len(bounds)):
                if upper[i]:
                    np.minimum(hi[drs[i]], budget[i], out=hi[drs[i]])
                else:
                    np.maximum(lo[drs[i]], budget[i], out=lo[drs[i]])
            sens, slack = _pick_sensitivities(lo, hi)
            ok_dr = lo < hi
            n_ok = ok_dr.all(axis=0)
            feasible = (
                n_ok
                & (sens >= band_lo).all(axis=0)
                & (sens <= band_hi).all(axis=0)
                & (np.diff(sens, axis=0) > 0).all(axis=0)
            )
            partial = int(ok_dr.sum(axis=0).max())
            if partial > best_partial[0]:
                best_partial = (partial, (n, alpha, int(ok_dr.sum(axis=0).argmax()), ok_dr))
            if not feasible.any():
                continue
            j = int(np.argmax(np.where(feasible, slack, -np.inf)))
            key = (round(float(slack[j]), 9), -n, -alpha, -ks[j])
            if best_key is None or key > best_key:
                best_key = key
                best = (n, alpha, ks[j], sens[:, j])

    if best is None:
        _, (n, alpha, j, ok_dr) = best_partial
        bad_drs = {dr for dr in range(6) if not ok_dr[dr, j]}
        # no empty interval means the ordering or plausibility band failed; all milestones take part
        violated = [m for m in milestones if m.dr_index in bad_drs] if bad_drs else list(milestones)
        raise CalibrationError(
            f"no grid point reproduces all milestones; closest (exponent={n}, alpha={alpha}) "
            f"fails DRs {sorted(bad_drs) or 'ordering/band'}",
            violated,
        )

    n, alpha, k, sens = best
    params = replace(
        base,
        exponent=float(n),
        rain_alpha=float(alpha),
        rain_k=float(k),
        sensitivity_table=tuple(round(float(s), 4) for s in sens),
    )
    misses = [m for m in milestones if breakpoint_rain(m.dr_index, m.distance, cfg, params, grid) != _norm(m.max_connected_rain)]
    if misses:
        raise CalibrationError("calibrated parameters lost milestones after rounding", misses)
    return params


def _pick_sensitivities(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint of each DR interval; one-sided intervals keep a fixed slack."""
    default = np.array(DATASHEET_SENSITIVITY_DBM)[:, None] * np.ones_like(lo)
    both = np.isfinite(lo) & np.isfinite(hi)
    only_hi = ~np.isfinite(lo) & np.isfinite(hi)
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    with np.errstate(invalid="ignore"):
        sens = np.where(both, (lo + hi) / 2.0, default)
        sens = np.where(only_hi, hi - _OPEN_SLACK, sens)
        sens = np.where(only_lo, lo + _OPEN_SLACK, sens)
        half = np.where(both, (hi - lo) / 2.0, _OPEN_SLACK)
    return sens, half.min(axis=0)


def _norm(b: Breakpoint) -> Breakpoint:
    return b if isinstance(b, str) else float(b)


# -- files -------------------------------------------------------------------

_PARAM_KEYS = ("pl0", "d0", "exponent", "rain_k", "rain_alpha", "antenna_gains")


def dump_params(params: ChannelParams, path: str | Path) -> None:
    lines = ["# ecas-sim channel parameters (dB, m, dB/km per (mm/h)^alpha, dBm)"]
    for key in _PARAM_KEYS:
        lines.append(f"{key} = {getattr(params, key):.6f}")
    for dr, s in enumerate(params.sensitivity_table):
        lines.append(f"sensitivity_dr{dr} = {s:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_key_values(text: str, origin: str = "<string>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def load_params(path: str | Path) -> ChannelParams:
    path = Path(path)
    kv = parse_key_values(path.read_text(encoding="utf-8"), str(path))
    try:
        fields_ = {key: float(kv[key]) for key in _PARAM_KEYS}
        table = tuple(float(kv[f"sensitivity_dr{dr}"]) for dr in range(6))
    except KeyError as exc:
        raise ValueError(f"{path}: missing key {exc.args[0]}") from None
    return ChannelParams(sensitivity_table=table, **fields_)


def load_milestones(path: str | Path) -> list[LinkMilestone]:
    """Read ``dr,distance_m,max_connected_rain[,source]`` rows."""
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        rows = csv.DictReader(line for line in fh if not line.lstrip().startswith("#"))
        for row in rows:
            raw = row["max_connected_rain"].strip()
            if raw in ("never", NEVER_CONNECTED):
                b: Breakpoint = NEVER_CONNECTED
            elif raw in ("beyond", BEYOND_SWEEP):
                b = BEYOND_SWEEP
            else:
                b = float(raw)
            out.append(LinkMilestone(int(row["dr"]), float(row["distance_m"]), b, (row.get("source") or "").strip()))
    return out
