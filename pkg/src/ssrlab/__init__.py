"""Split-select-retrain toolkit for offline RL hyperparameter selection on tabular problems."""

__version__ = "0.1.0"
