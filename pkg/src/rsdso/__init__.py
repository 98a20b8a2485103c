"""Rolling shutter direct sparse odometry: library, simulator and CLI."""

__version__ = "0.1.0"
