"""Physics-informed spectral features, uncertainty-aware beliefs, and learned budgeted station selection."""

__version__ = "0.1.0"
