"""Neural operator surrogates (DeepONet, PCANet, FNO) for parametric PDEs and
their use as forward maps in pCN Bayesian inversion."""

__version__ = "0.1.0"
