"""Analytic curvature of MLP latent spaces and curvature-matched transfer learning."""

__version__ = "0.1.0"
