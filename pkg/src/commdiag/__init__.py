"""Slow/hang diagnosis for collective communication, with a fault-injecting simulator."""

__version__ = "0.1.0"
