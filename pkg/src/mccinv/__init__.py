"""Approximate dual bounds for coefficient identification via averaged McCormick relaxations."""

__version__ = "0.1.0"
