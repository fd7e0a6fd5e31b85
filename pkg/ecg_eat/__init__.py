"""Multimodal ECG classification with explanation trustworthiness certification."""

__version__ = "0.1.0"
