"""Guided local feature matching at desk scale.

A coarse image matcher (4D correlation volume filtered by a trainable
consensus network) constrains local keypoint matching, backed by a small
reverse-mode autodiff core, a synthetic calibrated-scene generator, robust
two-view pose estimation, and an evaluation CLI.
"""

__version__ = "0.1.0"
