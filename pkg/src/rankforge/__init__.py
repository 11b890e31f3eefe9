"""rankforge: a desk-scale autonomous search-ranking research loop."""

__version__ = "0.1.0"
