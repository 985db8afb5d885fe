# __init__.py for the config module
"""Configuration loading and validation."""
