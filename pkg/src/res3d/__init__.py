"""3-D convolutional residual networks for video clip classification, in numpy."""

__version__ = "0.1.0"
