"""Version information for the odcs package."""

__version__ = "0.1.0"
