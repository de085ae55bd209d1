"""Fixed-point self-attention with implicit differentiation, on a small numpy autodiff."""

__version__ = "0.1.0"
