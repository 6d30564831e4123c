"""Semi-supervised adversarial domain adaptation with separated classifiers."""

__version__ = "0.1.0"
