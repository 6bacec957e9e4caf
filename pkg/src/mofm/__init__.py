"""Motion foundation model pipeline: pose heatmaps, discrete motion tokens, masked pretraining."""
__version__ = "0.1.0"
