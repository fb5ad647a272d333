"""Progressive identity alignment for cross-modality clothing-change retrieval."""

__version__ = "0.1.0"
