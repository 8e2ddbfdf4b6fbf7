"""Brain graph benchmark - GNNs vs structure-agnostic baselines on functional connectivity."""
__version__ = "0.1.0"
