"""Domain-attentive fusion of end-to-end dialect identification systems."""

__version__ = "0.1.0"
