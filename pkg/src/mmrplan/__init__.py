"""Corridor-based global planning and receding-horizon NMPC for cooperative
object transport by nonholonomic mobile manipulators."""

__version__ = "0.1.0"
