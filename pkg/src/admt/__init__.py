"""AD-MT: alternately-updated dual-teacher semi-supervised segmentation, desk scale."""

__version__ = "0.1.0"
