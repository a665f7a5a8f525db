"""Seeded simulator and campaign framework for single-pulse EMFI on an NCS2-class accelerator."""

__version__ = "0.1.0"
