"""transferbench: desk-scale adversarial transferability benchmark."""

__version__ = "0.1.0"
