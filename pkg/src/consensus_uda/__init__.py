"""Multi-source consensus pseudo-labels and uncertainty-rectified self-training for segmentation."""

__version__ = "0.1.0"
