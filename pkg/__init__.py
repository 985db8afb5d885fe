# __init__.py for the magcapsule package
"""
Magnetic Capsule Control - learned current control for a floating magnetic capsule.

This package simulates a capsule driven by a planar four-coil array, trains a
Soft Actor-Critic policy with sim-to-real fine-tuning and benchmarks it against
fixed-current and PID controllers on reference paths.
"""

__version__ = '1.0.0'
__author__ = 'Magnetic Capsule Control Team'
