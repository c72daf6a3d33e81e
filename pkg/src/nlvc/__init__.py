"""Non-local NetVLAD video classification toolkit (numpy, hand-written gradients)."""

__version__ = "0.1.0"
