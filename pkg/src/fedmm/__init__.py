"""Federated minimax optimization: FedMM, GDA baselines, and a simulation harness."""

from fedmm.core import (
    ClientState,
    ConvergenceError,
    DimensionMismatchError,
    DivergenceError,
    HyperParams,
    PrimalDualPair,
    ServerState,
    axpy,
    dot,
    norm,
    seeded_rng,
    vector,
    zeros,
)
from fedmm.federation import (
    ExperimentConfig,
    PartitionMode,
    PartitionSpec,
    ProblemKind,
    RunLog,
    run_experiment,
)
from fedmm.optim import OptimizerKind

__all__ = [
    "ClientState",
    "ConvergenceError",
    "DimensionMismatchError",
    "DivergenceError",
    "ExperimentConfig",
    "HyperParams",
    "OptimizerKind",
    "PartitionMode",
    "PartitionSpec",
    "PrimalDualPair",
    "ProblemKind",
    "RunLog",
    "ServerState",
    "axpy",
    "dot",
    "norm",
    "run_experiment",
    "seeded_rng",
    "vector",
    "zeros",
]

__version__ = "0.1.0"
