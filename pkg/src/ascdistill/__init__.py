"""Teacher-student distillation toolkit for acoustic scene classification."""

__version__ = "0.1.0"
