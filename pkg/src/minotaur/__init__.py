"""Few-shot cross-lingual semantic parsing with posterior alignment between languages."""

__version__ = "0.1.0"
