"""Cloud-resilient optical-SAR semantic segmentation toolkit."""

__version__ = "0.1.0"
