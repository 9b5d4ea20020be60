"""Cloth-changing person re-identification with fine-grained feature mining
and attribute recomposition, at desk scale on a synthetic benchmark."""

__version__ = "0.1.0"
