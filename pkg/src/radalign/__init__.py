"""Multi-drive radar pose alignment: grid correlation, robust pose graph, radar maps."""

__version__ = "0.1.0"
