"""Point-cloud ocean data assimilation on a synthetic twin world."""

__version__ = "0.1.0"
