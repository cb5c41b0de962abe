"""hashsdf: neural implicit-surface reconstruction at desk scale.

Learns a hash-encoded signed distance field plus radiance field from
calibrated multi-view images, rendered with NeuS-style unbiased volume
rendering and trained with analytic second-order derivatives for the
normal-dependent loss terms.  Includes an incremental pipeline with rigid
global-transform prediction for dynamic sequences.
"""

__version__ = "0.1.0"
