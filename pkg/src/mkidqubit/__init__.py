"""Radiation-event simulator and analysis pipeline for a stacked MKID / qubit / MKID detector."""

__version__ = "0.1.0"

SCHEMA_VERSION = 1
