"""Desk-scale segmentation strategy laboratory.

Synthetic phantom cohorts, dataset fingerprinting, plan derivation,
contraction-aware augmentation, a self-contained trainable 3D U-Net
(numpy, analytic gradients), transfer and rehearsal fine-tuning,
overlap metrics with rank-sum significance, and a small orchestrator
that runs named strategy codes end to end.
"""

__version__ = "0.1.0"
