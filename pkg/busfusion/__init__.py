"""busfusion - Multi-task breast ultrasound lesion segmentation and classification."""

from busfusion.__version__ import __version__

__version__ = __version__
__all__ = []
