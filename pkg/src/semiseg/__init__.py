"""Semi-supervised segmentation: co-trained students distilled from a promptable teacher."""

__version__ = "0.1.0"
