"""Urban vibrancy embeddings and vibrancy-aware traffic prediction."""

__version__ = "0.1.0"
