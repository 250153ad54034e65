"""Multi-radar point-cloud fusion and oriented 3D box detection."""

__version__ = "0.1.0"
