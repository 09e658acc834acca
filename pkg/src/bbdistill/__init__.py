"""Training a lightweight per-pixel segmenter from a black-box teacher's probabilities."""
__version__ = "0.1.0"
