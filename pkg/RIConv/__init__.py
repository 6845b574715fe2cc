"""
RIConv - rotation-invariant point convolutions with multiple equivariant local reference frames
"""

__version__ = "0.1.0"
