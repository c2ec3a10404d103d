"""Nested integer quantization for a small numpy transformer.

One c-bit checkpoint serves every lower precision by keeping the most
significant bits of each code.
"""

__version__ = "0.1.0"
