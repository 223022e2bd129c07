"""Multi-agent predictive state representations learned by tensor decomposition."""

__version__ = "0.1.0"
