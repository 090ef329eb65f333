"""Fault-tolerant task orchestration with redundant sampling and vote consensus."""

__version__ = "0.1.0"
