"""Combining weak (slide-level) and strong (patch-level) supervision.

Numpy implementation of self-weighted weak supervision and its baselines,
covariate-shift reduction strategies, a synthetic Gleason-grading data
generator and the cross-validated benchmark harness.
"""

__version__ = "0.1.0"
