"""Many-to-one multi-scale regression transformer for spatial-transcriptomics prediction."""

__version__ = "0.1.0"
