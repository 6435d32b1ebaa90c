"""Goal-image-conditioned last-meter navigation in a small 2D simulator.

Modules: ``geometry`` (poses, actions, start grids), ``sensors`` (feature grids
and oracle segmentation), ``expert`` (trajectory collection and pseudo-goal
datasets), ``nn`` (MLP substrate), ``decoders`` (score-matrix and attention
policies), ``rollout``, ``metrics``, ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
