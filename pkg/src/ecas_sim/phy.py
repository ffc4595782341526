"""LoRa physical-layer arithmetic: data-rate profiles, airtime, duty cycle."""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, replace
from fractions import Fraction

BANDWIDTH_HZ = 125_000

# SX127x datasheet sensitivities at 125 kHz, indexed by DR (DR0 = SF12).
DATASHEET_SENSITIVITY_DBM = (-137.0, -134.5, -132.0, -129.0, -126.0, -123.0)

EU868_TX_POWER_RANGE = (2.0, 14.0)


@dataclass(frozen=True)
class DataRateProfile:
    dr_index: int
    spreading_factor: int
    bandwidth: int = BANDWIDTH_HZ

    @property
    def symbol_time(self) -> float:
        return (2**self.spreading_factor) / self.bandwidth


@dataclass(frozen=True)
class RadioConfig:
    """Radio settings shared by every node.

    ``coding_rate`` is the denominator of ``4/x`` (5..8).
    """

    coding_rate: int = 5
    preamble_symbols: int = 8
    explicit_header: bool = True
    crc: bool = True
    payload_bytes: int = 20
    tx_power: float = 14.0
    carrier: float = 868e6
    duty_cycle_limit: float = 0.01

    def __post_init__(self) -> None:
        if self.coding_rate not in (5, 6, 7, 8):
            raise ValueError(f"coding rate must be 4/5..4/8, got 4/{self.coding_rate}")
        if self.payload_bytes < 1:
            raise ValueError("payload_bytes must be >= 1")
        if not 0.0 < self.duty_cycle_limit <= 1.0:
            raise ValueError("duty_cycle_limit must be in (0, 1]")
        lo, hi = EU868_TX_POWER_RANGE
        if not lo <= self.tx_power <= hi:
            raise ValueError(f"tx_power must be within {lo:+.0f}..{hi:+.0f} dBm")
        if self.preamble_symbols < 0:
            raise ValueError("preamble_symbols must be >= 0")

    def with_payload(self, payload_bytes: int) -> RadioConfig:
        return replace(self, payload_bytes=payload_bytes)


_PROFILES = tuple(DataRateProfile(dr, 12 - dr) for dr in range(6))


def dr_profile(dr_index: int) -> DataRateProfile:
    if isinstance(dr_index, bool) or not isinstance(dr_index, int) or not 0 <= dr_index <= 5:
        raise ValueError(f"data rate index must be an integer in 0..5, got {dr_index!r}")
    return _PROFILES[dr_index]


def sensitivity(profile: DataRateProfile, params) -> float:
    """Demodulation floor (dBm) for ``profile`` from a calibrated sensitivity table."""
    return params.sensitivity_table[profile.dr_index]


def low_data_rate_optimize(profile: DataRateProfile) -> bool:
    return profile.spreading_factor >= 11 and profile.bandwidth <= BANDWIDTH_HZ


def payload_symbols(profile: DataRateProfile, cfg: RadioConfig, payload_bytes: int | None = None) -> int:
    pl = cfg.payload_bytes if payload_bytes is None else payload_bytes
    sf = profile.spreading_factor
    de = 1 if low_data_rate_optimize(profile) else 0
    ih = 0 if cfg.explicit_header else 1
    crc = 1 if cfg.crc else 0
    num = 8 * pl - 4 * sf + 28 + 16 * crc - 20 * ih
    blocks = max(math.ceil(num / (4 * (sf - 2 * de))), 0)
    return 8 + blocks * cfg.coding_rate


def airtime_symbols(profile: DataRateProfile, cfg: RadioConfig, payload_bytes: int | None = None) -> Fraction:
    """Total symbols on air, exact (preamble + 4.25 sync + payload)."""
    return cfg.preamble_symbols + Fraction(17, 4) + payload_symbols(profile, cfg, payload_bytes)


def time_on_air(profile: DataRateProfile, cfg: RadioConfig) -> float:
    """Packet airtime in seconds."""
    return float(airtime_symbols(profile, cfg) * Fraction(2**profile.spreading_factor, profile.bandwidth))


def time_on_air_us(profile: DataRateProfile, cfg: RadioConfig) -> int:
    """Airtime in integer microseconds (exact for 125 kHz)."""
    us = airtime_symbols(profile, cfg) * Fraction(2**profile.spreading_factor * 1_000_000, profile.bandwidth)
    return math.ceil(us)


def min_send_interval(toa: float, duty_cycle_limit: float, app_period: float) -> float:
    if toa <= 0 or app_period <= 0:
        raise ValueError("toa and app_period must be positive")
    if not 0.0 < duty_cycle_limit <= 1.0:
        raise ValueError("duty_cycle_limit must be in (0, 1]")
    return max(app_period, toa / duty_cycle_limit)


@lru_cache(maxsize=256)
def min_send_interval_us(toa_us: int, duty_cycle_limit: float, app_period_us: int) -> int:
    if toa_us <= 0 or app_period_us <= 0:
        raise ValueError("toa and app_period must be positive")
    if not 0.0 < duty_cycle_limit <= 1.0:
        raise ValueError("duty_cycle_limit must be in (0, 1]")
    # Fraction avoids 626688 / 0.01 landing one ulp above the integer.
    off = Fraction(toa_us) / Fraction(str(duty_cycle_limit))
    return max(app_period_us, math.ceil(off))


def sends_in_window(interval_us: int, first_us: int, duration_us: int) -> int:
    """Number of evenly spaced sends starting at ``first_us`` that fit in ``[0, duration]``."""
    if first_us > duration_us:
        return 0
    return 1 + (duration_us - first_us) // interval_us


def calibrate_payload(
    targets: dict[int, float],
    duration: float = 86400.0,
    app_period: float = 57.6,
    base: RadioConfig | None = None,
    max_payload: int = 64,
    coding_rates: tuple[int, ...] = (5, 6, 7, 8),
) -> RadioConfig:
    """Pick (coding rate, payload) so duty-bound per-round send counts hit ``targets``.

    ``targets`` maps DR index to the wanted sends per sensor per round. Data
    rates not listed must stay unbound by the duty cycle. Candidates are
    ranked by worst relative error, ties by (coding rate, payload).
    """
    base = base or RadioConfig()
    duration_us = round(duration * 1e6)
    period_us = round(app_period * 1e6)
    best: tuple[float, int, int] | None = None
    for cr in coding_rates:
        for pl in range(1, max_payload + 1):
            cfg = replace(base, coding_rate=cr, payload_bytes=pl)
            worst = 0.0
            ok = True
            for dr in range(6):
                interval = min_send_interval_us(time_on_air_us(dr_profile(dr), cfg), cfg.duty_cycle_limit, period_us)
                if dr in targets:
                    n = sends_in_window(interval, period_us, duration_us)
                    worst = max(worst, abs(n / targets[dr] - 1.0))
                elif interval != period_us:
                    ok = False
                    break
            if ok and (best is None or worst < best[0]):
                best = (worst, cr, pl)
    if best is None:
        raise ValueError("no coding rate / payload keeps the unlisted data rates duty-free")
    return replace(base, coding_rate=best[1], payload_bytes=best[2])
