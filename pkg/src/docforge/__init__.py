"""docforge: deterministic synthetic document pages + parsing metrics."""

__version__ = "0.1.0"
