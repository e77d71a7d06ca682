"""BFT protocol design-space toolkit and deterministic simulation engine."""

__version__ = "0.1.0"
