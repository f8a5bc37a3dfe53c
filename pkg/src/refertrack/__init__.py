"""Zero-shot referring multi-object tracking from precomputed 3D detections."""

__version__ = "0.1.0"
