"""QKD post-processing and trusted-node key transport simulator."""

__version__ = "0.1.0"
