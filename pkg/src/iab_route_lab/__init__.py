"""Packet routing simulator and learners for IAB networks."""

__version__ = "0.1.0"
