"""Batch, Layer, Instance and Group Normalization with gradients, oracles and a toy trainer."""
__version__ = "0.1.0"
