"""magnetrec - Multimodal graph recommendation with a structured mixture of experts."""

__version__ = "0.1.0"
