"""Statistical metric learning (SML) for patch-based hyperspectral classification."""
__version__ = "0.1.0"
