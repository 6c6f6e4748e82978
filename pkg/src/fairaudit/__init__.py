"""Group privacy-risk auditing for small classifiers trained with SGD, DP-SGD and DP-SGD-S."""

__version__ = "0.1.0"
