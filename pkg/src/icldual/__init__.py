"""icldual: attention layers, their dual gradient-descent models, and the
synthetic in-context-learning experiments built on them."""

__version__ = "0.1.0"
