"""Multi-view photometric stereo with neural density, BRDF and shadow fields."""

__version__ = "0.1.0"
