# __init__.py for the services module
"""Services that turn core results into run artifacts."""
