"""Meta corrupted-pixel mining for segmentation under noisy labels."""

__version__ = "0.1.0"
