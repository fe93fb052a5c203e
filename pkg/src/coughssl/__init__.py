"""Contrastive pre-training and masked-attention ensembles for cough classification."""

__version__ = "0.1.0"
