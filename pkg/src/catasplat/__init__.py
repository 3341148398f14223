"""Neural point catacaustics: point splatting with a camera-conditioned warp field for curved reflectors."""

__version__ = "0.1.0"
