# __init__.py for the utils module
"""Utility functions and classes for the magnetic capsule controller."""
