"""Permutation-equivariant model-based offline RL for budget-constrained auto-bidding.

Modules: ``auction_env`` (ground-truth simulator), ``dataset`` (logged
transitions), ``env_model`` (PE environment models and ensembles),
``offline_rl`` (robust actor-critic), ``trainer`` (training loop,
evaluation, baselines and ablations) and ``cli``.
"""

__version__ = "0.1.0"
