"""Two-stage ROI/core-scale cancer classification for RF micro-ultrasound."""

__version__ = "0.1.0"
