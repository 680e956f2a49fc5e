"""Robust distributed cooperative RSS localization with LoS/NLoS mixtures."""

from .channel import ChannelParams, MeasurementSet, Mode, NoiseModel
from .graph import DirectedNetwork, compatibility_test, complete_network

__all__ = [
    "ChannelParams",
    "DirectedNetwork",
    "MeasurementSet",
    "Mode",
    "NoiseModel",
    "compatibility_test",
    "complete_network",
]
__version__ = "0.1.0"
