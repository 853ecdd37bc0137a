"""Mirror-learning drift functions, a drift-agnostic policy trainer and an ES meta-trainer."""

__version__ = "0.1.0"
