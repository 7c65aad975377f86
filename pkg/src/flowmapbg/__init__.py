"""Few-step invertible flow maps with exact per-step likelihoods for
Boltzmann sampling on analytic energy targets."""

__version__ = "0.1.0"
