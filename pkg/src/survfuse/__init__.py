"""Multimodal survival prediction: co-attention fusion of pathology phenotypes
and gene modules, attention pooling, and Cox partial-likelihood training."""

__version__ = "0.1.0"
