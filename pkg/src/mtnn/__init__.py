"""Taylor-series predictors with learned Jacobian networks.

The package trains a stack of per-output dense networks to act as the
Jacobian of an unknown discrete-time plant, embeds that Jacobian in a first-
or second-order Taylor update, and keeps selected entries sign-constrained
either structurally (gating) or through penalties. On top sit rollout
evaluation utilities, two synthetic thermal plants, and a receding-horizon
controller that differentiates through the predictor.
"""

__version__ = "0.1.0"
