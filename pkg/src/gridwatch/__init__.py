"""Specification-based intrusion detection for IEC 60870-5-104 traffic."""

__version__ = "0.1.0"
