"""Discrete-event simulator for adaptive LoRa data-rate control under rain."""

from .channel import ChannelParams, calibrate, link_margin
from .control import make_policy
from .engine import RoundConfig, RoundStats, SensorSeed, run_round
from .phy import RadioConfig, dr_profile, time_on_air

__version__ = "0.1.0"

__all__ = [
    "ChannelParams",
    "RadioConfig",
    "RoundConfig",
    "RoundStats",
    "SensorSeed",
    "calibrate",
    "dr_profile",
    "link_margin",
    "make_policy",
    "run_round",
    "time_on_air",
]
