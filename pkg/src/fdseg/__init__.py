"""fdseg: segmentation training kit with layer-wise foreground/background
feature-discrepancy penalties and an exchangeable cross-dataset variant."""

__version__ = "0.1.0"
