"""Dense surface correspondence distributions and the pose pipeline built on them."""

__version__ = "0.1.0"
