"""Decoupled perception/reasoning VQA pipeline and evaluation harness."""

__version__ = "0.1.0"
