"""Kalman-filter history encoders for recurrent reinforcement learning.

The package is organised bottom-up: ``autodiff`` (array tape), ``scan``
(associative scans with masking), ``kalman`` (reference filters),
``kernels`` (compiled filter sweeps), ``layers`` (trainable filter layers),
``envs`` (Best Arm Identification), ``agent`` (recurrent actor-critic with
discrete SAC), ``config`` and ``cli``.
"""
from __future__ import annotations

__version__ = "0.1.0"
