"""Point-cloud edge detection from local-patch projection distances and a small transformer."""

__version__ = "0.1.0"
