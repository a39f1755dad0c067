"""Machine-learning-supported model predictive control and estimation toolkit."""

__version__ = "0.1.0"
