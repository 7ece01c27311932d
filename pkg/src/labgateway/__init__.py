"""Gateway service linking EHR laboratory data to ML classifier sidecars."""

__version__ = "0.1.0"
