"""Range-regularization lab: regularizers, quantizers, palettizers and a small trainer."""

__version__ = "0.1.0"
