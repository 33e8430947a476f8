"""moelab: a desk-scale laboratory for MoE training systems."""

__version__ = "0.1.0"
