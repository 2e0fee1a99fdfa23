"""Monotone couplings, Ball's alternating joining and del Junco star-couplings
for finite-alphabet Bernoulli shifts."""

__version__ = "0.1.0"
