"""Multiple-instance neural network with sparse attention pooling."""

__version__ = "0.1.0"
