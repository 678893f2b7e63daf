"""Multi-sensor multi-object tracking and density-fusion workbench."""

__version__ = "0.1.0"
