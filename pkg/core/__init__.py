# __init__.py for the core module
"""Core simulation, learning and evaluation logic."""
