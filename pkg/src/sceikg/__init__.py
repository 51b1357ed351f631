"""Sequential herb recommendation over an interaction knowledge graph."""

__version__ = "0.1.0"
