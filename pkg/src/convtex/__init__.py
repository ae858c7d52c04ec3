"""convtex: a convolutional encoder-decoder for reading math-expression images.

A residual CNN turns the raster into a grid of feature vectors; a causal
convolutional decoder with gated linear units and per-layer attention emits
markup tokens.  Everything numeric runs on a small tape-based autodiff engine
over NumPy arrays, with an optional compiled kernel core.
"""

__version__ = "0.1.0"
