"""Loss-distance cross-selection and optimal-transport pseudo-labeling for long-tailed noisy labels."""

__version__ = "0.1.0"
