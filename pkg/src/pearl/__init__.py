"""Pathway-level representation learning for spatial transcriptomics."""

__version__ = "0.1.0"
