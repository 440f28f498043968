"""Lyrics-to-song flow matching at desk scale, on a synthetic song world."""
from jamflow._accel import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
