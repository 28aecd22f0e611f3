"""
THz Parameter Reconstruction
Per-pixel recovery of amplitude, pulse width, depth and phase from FMCW THz
depth profiles by trust-region fitting, a model-based encoder, or both.
"""

__version__ = "0.3.0"
