"""Action-aware mixed-precision weight quantization for small policies."""
__version__ = "0.1.0"
