"""Task-driven two-modality image fusion with a learnable fusion loss."""

__version__ = "0.1.0"
