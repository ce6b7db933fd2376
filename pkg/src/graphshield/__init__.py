"""Evasion-attack detection through classifier behavior graphs and a GCN."""

__version__ = "0.1.0"
