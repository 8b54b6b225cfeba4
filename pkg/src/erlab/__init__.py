"""Explanation-regularisation laboratory: a numpy transformer, attribution-guided training and analysis."""
__version__ = "0.1.0"
