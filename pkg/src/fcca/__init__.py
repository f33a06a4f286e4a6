"""Desk-scale simulator of federated cINN clustering with a FedAvg baseline."""

__version__ = "0.1.0"
