"""Simulated IoT inventory-monitoring refrigerator."""

__version__ = "0.1.0"
