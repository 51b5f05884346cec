"""nplab: conditional and Gaussian neural processes with exact GP references.

A small laboratory for meta-learning prediction maps: a self-contained
reverse-mode autodiff engine, exact Gaussian-process reference machinery,
synthetic data processes, the five model families, autoregressive rollout,
training/selection loops, and KL/log-likelihood metrics.
"""

from . import ar, autodiff, data, encoders, evaluate, gp, models, train

__all__ = ["ar", "autodiff", "data", "encoders", "evaluate", "gp", "models", "train"]

__version__ = "0.1.0"
