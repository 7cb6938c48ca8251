"""Prior-quantized optical aberration correction at desk scale."""

__version__ = "0.1.0"
