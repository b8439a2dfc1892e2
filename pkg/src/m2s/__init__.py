"""Multi-to-Single small-object detection on a numpy autodiff engine."""

from .config import RunConfig
from .model import M2SDetector

__version__ = "0.1.0"

__all__ = ["M2SDetector", "RunConfig", "__version__"]
