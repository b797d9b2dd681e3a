"""Monte Carlo simulation and analytics for energy-harvesting IoT event-sensing networks."""
from .model import (
    Aggregation,
    ConfigError,
    Device,
    DeviceState,
    Event,
    Layout,
    Report,
    SimConfig,
    aggregate_information,
    device_information,
    duty_cycle_is_on,
    sensing_probability,
)

__version__ = "0.1.0"
