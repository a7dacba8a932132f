"""Average-gradient-outer-product mechanisms for deep neural collapse."""

__version__ = "0.1.0"
