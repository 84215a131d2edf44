"""Simulation library for autonomous ergodic palpation and stiffness mapping."""

__version__ = "0.1.0"
