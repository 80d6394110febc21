"""Two-view image classification: patch datasets, frozen-backbone late fusion, evaluation."""

__version__ = "0.1.0"
