"""Shared autonomous-mobility fleet simulation with learned vehicle repositioning."""

__version__ = "0.1.0"
