"""Fall-prevention pipeline for an assistive hip device, at desk scale."""

__version__ = "0.1.0"
