"""Simulator and control plane for a virtual switch with unbounded resources,
realized over a fabric of resource-limited programmable switches."""

__version__ = "0.1.0"
