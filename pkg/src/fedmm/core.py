"""Parameter containers, deterministic RNG, and the small vector kernel.

Parameter vectors are flat 1-D float64 numpy arrays, frozen (read-only) at
construction. Every operation here is pure: inputs are never modified and
results are freshly allocated. All randomness in the package flows through
:func:`seeded_rng`, which pins a single generator algorithm (PCG64) so that
identical seeds give identical streams across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

Vector = np.ndarray


class DimensionMismatchError(ValueError):
    """Two vectors of unequal length were combined."""

    def __init__(self, op: str, len_a: int, len_b: int):
        super().__init__(f"{op}: dimension mismatch, {len_a} vs {len_b}")
        self.len_a = len_a
        self.len_b = len_b


class DivergenceError(RuntimeError):
    """An optimizer iterate became non-finite."""

    def __init__(self, where: str, step: int):
        super().__init__(f"non-finite iterate in {where} at step {step}")
        self.where = where
        self.step = step


class ConvergenceError(RuntimeError):
    """An iterative solve hit its iteration cap before reaching tolerance."""

    def __init__(self, what: str, grad_norm: float, iterations: int):
        super().__init__(
            f"{what} did not converge: gradient norm {grad_norm:.3e} "
            f"after {iterations} iterations"
        )
        self.grad_norm = grad_norm
        self.iterations = iterations


def vector(data: Sequence[float] | np.ndarray) -> Vector:
    """Build a frozen float64 parameter vector, rejecting NaN/Inf."""
    v = np.array(data, dtype=np.float64).reshape(-1)
    if not np.isfinite(v).all():
        raise ValueError("parameter vector contains non-finite entries")
    v.flags.writeable = False
    return v


def zeros(n: int) -> Vector:
    v = np.zeros(n, dtype=np.float64)
    v.flags.writeable = False
    return v


def axpy(a: float, x: Vector, y: Vector) -> Vector:
    """Return a*x + y without touching the inputs."""
    if len(x) != len(y):
        raise DimensionMismatchError("axpy", len(x), len(y))
    return a * x + y


def dot(x: Vector, y: Vector) -> float:
    if len(x) != len(y):
        raise DimensionMismatchError("dot", len(x), len(y))
    return float(np.dot(x, y))


def norm(x: Vector) -> float:
    return float(np.linalg.norm(x))


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: PCG64 keyed by the 64-bit seed, nothing else."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class PrimalDualPair:
    """One (omega, psi) point of the minimax problem."""

    omega: Vector
    psi: Vector

    @property
    def dims(self) -> tuple[int, int]:
        return len(self.omega), len(self.psi)


@dataclass
class ClientState:
    """One client's primal pair, dual pair, and local objective handle.

    lambda/beta are the consensus multipliers for omega/psi; they start at
    zero and are updated once per round by the FedMM dual step.
    """

    id: int
    objective: "object"
    pair: PrimalDualPair
    lam: Vector
    beta: Vector

    def __post_init__(self):
        d1, d2 = self.pair.dims
        if len(self.lam) != d1:
            raise DimensionMismatchError("ClientState.lam", len(self.lam), d1)
        if len(self.beta) != d2:
            raise DimensionMismatchError("ClientState.beta", len(self.beta), d2)

    @classmethod
    def initial(cls, client_id: int, objective, global_pair: PrimalDualPair) -> "ClientState":
        """Round-0 state: primal copies the globals, duals are zero."""
        d1, d2 = global_pair.dims
        od1, od2 = objective.dims
        if (d1, d2) != (od1, od2):
            raise DimensionMismatchError("ClientState.initial", d1 + d2, od1 + od2)
        return cls(
            id=client_id,
            objective=objective,
            pair=global_pair,
            lam=zeros(d1),
            beta=zeros(d2),
        )

    def with_pair(self, omega: Vector, psi: Vector) -> "ClientState":
        return replace(self, pair=PrimalDualPair(omega, psi))


@dataclass
class ServerState:
    """Global consensus pair plus the round counter and communication ledger."""

    global_pair: PrimalDualPair
    round: int = 0
    floats_sent: int = 0

    def record_round(self, n_clients: int) -> None:
        """One round = every client downloads and uploads both blocks."""
        d1, d2 = self.global_pair.dims
        self.floats_sent += n_clients * 2 * (d1 + d2)
        self.round += 1


@dataclass(frozen=True)
class HyperParams:
    """Optimizer hyperparameters shared by all algorithm variants.

    local_steps holds one entry per client (M_i). local_tol, when positive,
    switches FedMM's local solve from fixed-step to run-until-gradient-norm
    mode; it is ignored by the other optimizers.
    """

    mu1: float = 1.0
    mu2: float = 1.0
    eta1: float = 0.01
    eta2: float = 0.01
    eta3: float = 1.0
    nu: float = 0.25
    local_steps: tuple[int, ...] = (20,)
    rounds: int = 200
    prox_mu: float = 1.0
    tol: float = 1e-6
    local_tol: float = 0.0
    local_max_iters: int = 200_000

    def __post_init__(self):
        if self.mu1 <= 0 or self.mu2 <= 0:
            raise ValueError(f"mu1/mu2 must be positive, got {self.mu1}, {self.mu2}")
        if self.eta1 <= 0 or self.eta2 <= 0:
            raise ValueError(f"eta1/eta2 must be positive, got {self.eta1}, {self.eta2}")
        if not 0.0 < self.eta3 <= 1.0:
            raise ValueError(f"eta3 must be in (0, 1], got {self.eta3}")
        if self.nu < 0:
            raise ValueError(f"nu must be nonnegative, got {self.nu}")
        if any(m < 1 for m in self.local_steps):
            raise ValueError(f"every M_i must be >= 1, got {self.local_steps}")
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.prox_mu < 0:
            raise ValueError(f"prox_mu must be nonnegative, got {self.prox_mu}")
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")

    def steps_for(self, client_id: int) -> int:
        if len(self.local_steps) == 1:
            return self.local_steps[0]
        return self.local_steps[client_id]

    def expanded(self, n_clients: int) -> "HyperParams":
        """Replicate a single M entry to one per client."""
        if len(self.local_steps) == n_clients:
            return self
        if len(self.local_steps) == 1:
            return replace(self, local_steps=self.local_steps * n_clients)
        raise ValueError(
            f"local_steps has {len(self.local_steps)} entries for {n_clients} clients"
        )
