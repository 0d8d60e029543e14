"""Universal graph prompt tuning with reinforcement-learned prompt editing."""

__version__ = "0.1.0"
