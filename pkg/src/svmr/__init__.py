"""Two-stage semantic video moment retrieval over pre-extracted features."""

__version__ = "0.1.0"
