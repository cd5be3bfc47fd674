"""Spatio-temporal object mapping with change detection and robust loop closure."""

__version__ = "0.1.0"
