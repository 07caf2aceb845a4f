"""Desk-scale federated ensemble transfer simulator."""

__version__ = "0.1.0"
