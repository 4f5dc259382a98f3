"""Few-shot Gaussian process classification with a tempered logistic-softmax likelihood."""

__version__ = "0.1.0"
