"""Desk-scale lab for studying how round-to-nearest weight quantization
interacts with language-model unlearning: small updates get masked by coarse
grids, adapter-concentrated updates survive them."""

__version__ = "0.1.0"
