"""Partitioned neural networks: single-run hyperparameter optimization.

Subpackages:
    autodiff   reverse-mode tape engine over dense float64 tensors
    partition  parameter partitioning, subnetwork views, checkpoints
    hyper      differentiable hyperparameter modules (masks, affine
               augmentation, concrete dropout)
    training   interleaved partitioned training loop
    bound      exact Beta-Bernoulli oracle for the marginal-likelihood bound
    federated  deterministic federated-learning simulator
    data       dataset generators, IDX ingestion, chunk splitting
    cli        experiment runner
"""

__version__ = "0.1.0"

from . import autodiff, bound, data, federated, hyper, partition, training

__all__ = [
    "autodiff",
    "bound",
    "data",
    "federated",
    "hyper",
    "partition",
    "training",
    "__version__",
]
