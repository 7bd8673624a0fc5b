"""Verification oracles: algebraic identity checks, finite differences,
stationarity summaries, and empirical constant estimation.

The four identity checks compare one converged federated round against the
closed-form relations that exact local solves imply:

  sum_identity_psi    sum_i psi_i' = sum_i psi_i + (1/mu2) sum_i grad_ps f_i(after)
  sum_identity_omega  sum_i om_i'  = sum_i om_i  - (1/mu1) sum_i grad_om f_i(after)
  step_identity_psi   mu2 (psi_i' - psi0) = grad_ps f_i(after) - grad_ps f_i(before)
  step_identity_omega mu1 (om_i'  - om0)  = grad_om f_i(before) - grad_om f_i(after)

Each picks up residue proportional to the achieved local gradient norm e, so
the pass tolerance scales as 1e-8 + 10*e (times N for the summed identities).
All checks are read-only: they never mutate optimizer state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from fedmm.core import (
    ClientState,
    HyperParams,
    PrimalDualPair,
    ServerState,
    Vector,
    vector,
)
from fedmm.objectives import LocalObjective, QuadraticSaddle, inner_max
from fedmm.optim import run_round, OptimizerKind

BASE_TOL = 1e-8
TOL_ERROR_FACTOR = 10.0


@dataclass(frozen=True)
class IdentityReport:
    name: str
    round: int
    residual_norm: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.residual_norm <= self.tolerance


def reports_to_csv(reports: Sequence[IdentityReport]) -> str:
    lines = ["name,round,residual,tolerance,pass"]
    for r in reports:
        lines.append(
            f"{r.name},{r.round},{repr(r.residual_norm)},{repr(r.tolerance)},"
            f"{str(r.passed).lower()}"
        )
    return "\n".join(lines) + "\n"


def local_solve_error(state: ClientState) -> float:
    """Achieved local gradient norm after a round, read off the dual recovery.

    At an exact local solve the new duals satisfy lam = -grad_om f and
    beta = +grad_ps f at the end-of-round iterate, so the mismatch equals the
    residual gradient of the local augmented Lagrangian.
    """
    om, ps = state.pair.omega, state.pair.psi
    e_om = float(np.linalg.norm(state.objective.grad_omega(om, ps) + state.lam))
    e_ps = float(np.linalg.norm(state.objective.grad_psi(om, ps) - state.beta))
    return max(e_om, e_ps)


def check_identities(
    before: Sequence[ClientState],
    after: Sequence[ClientState],
    global_before: PrimalDualPair,
    hp: HyperParams,
    round_index: int = 0,
) -> list[IdentityReport]:
    """Residuals of the four converged-round identities for one federated round.

    `before`/`after` are the client states captured immediately around one
    FedMM round with run-to-tolerance local solves; `global_before` is the
    consensus pair the round started from.
    """
    if len(before) != len(after) or any(
        b.id != a.id for b, a in zip(before, after)
    ):
        raise ValueError("before/after client lists do not match")
    n = len(before)
    e = max(local_solve_error(a) for a in after)
    tol_step = BASE_TOL + TOL_ERROR_FACTOR * e
    tol_sum = tol_step * n

    g_om_after = [a.objective.grad_omega(a.pair.omega, a.pair.psi) for a in after]
    g_ps_after = [a.objective.grad_psi(a.pair.omega, a.pair.psi) for a in after]
    g_om_before = [b.objective.grad_omega(b.pair.omega, b.pair.psi) for b in before]
    g_ps_before = [b.objective.grad_psi(b.pair.omega, b.pair.psi) for b in before]

    sum_psi = sum(a.pair.psi for a in after) - sum(b.pair.psi for b in before)
    res_a1 = float(np.linalg.norm(sum_psi - sum(g_ps_after) / hp.mu2))

    sum_om = sum(a.pair.omega for a in after) - sum(b.pair.omega for b in before)
    res_a2 = float(np.linalg.norm(sum_om + sum(g_om_after) / hp.mu1))

    res_a3 = max(
        float(
            np.linalg.norm(
                hp.mu2 * (a.pair.psi - global_before.psi) - (ga - gb)
            )
        )
        for a, ga, gb in zip(after, g_ps_after, g_ps_before)
    )
    res_a4 = max(
        float(
            np.linalg.norm(
                hp.mu1 * (a.pair.omega - global_before.omega) - (gb - ga)
            )
        )
        for a, ga, gb in zip(after, g_om_after, g_om_before)
    )

    return [
        IdentityReport("sum_identity_psi", round_index, res_a1, tol_sum),
        IdentityReport("sum_identity_omega", round_index, res_a2, tol_sum),
        IdentityReport("step_identity_psi", round_index, res_a3, tol_step),
        IdentityReport("step_identity_omega", round_index, res_a4, tol_step),
    ]


def run_identity_suite(
    objectives: Sequence[LocalObjective],
    hp: HyperParams,
    rounds: int,
    local_tol: float = 1e-10,
    init: PrimalDualPair | None = None,
    skip_first_step_identities: bool = True,
) -> list[IdentityReport]:
    """Drive FedMM with run-to-tolerance local solves and check every round.

    The per-client step identities need the *previous* round to have been
    solved to optimality, which is vacuous at round 0 (duals are zero there),
    so they are skipped for the first round unless told otherwise.
    """
    d1, d2 = objectives[0].dims
    pair = init or PrimalDualPair(vector(np.zeros(d1)), vector(np.zeros(d2)))
    server = ServerState(pair)
    clients = [ClientState.initial(i, o, pair) for i, o in enumerate(objectives)]
    hp = hp.expanded(len(clients))

    reports: list[IdentityReport] = []
    for t in range(rounds):
        before = list(clients)
        global_before = server.global_pair
        clients = run_round(OptimizerKind.FEDMM, clients, server, hp, local_tol=local_tol)
        round_reports = check_identities(before, clients, global_before, hp, round_index=t)
        if t == 0 and skip_first_step_identities:
            round_reports = [r for r in round_reports if r.name.startswith("sum_")]
        reports.extend(round_reports)
    return reports


def finite_diff_grad(f: Callable[[Vector], float], x: Vector, h: float) -> Vector:
    """Central-difference gradient, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for j in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp, fm = f(vector(xp)), f(vector(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite objective value at coordinate {j}")
        g[j] = (fp - fm) / (2.0 * h)
    return vector(g)


def estimate_kappa(
    objectives: Sequence[LocalObjective],
    omega_pairs: Sequence[tuple[Vector, Vector]],
    tol: float,
) -> float:
    """Empirical Lipschitz modulus of the inner maximizer over probe pairs."""
    if not omega_pairs:
        raise ValueError("estimate_kappa needs at least one probe pair")
    best = 0.0
    for om, om_prime in omega_pairs:
        denom = float(np.linalg.norm(np.asarray(om) - np.asarray(om_prime)))
        if denom == 0.0:
            raise ValueError("duplicate probe pair (omega == omega'): ratio undefined")
        psi_a = inner_max(objectives, om, tol)
        psi_b = inner_max(objectives, om_prime, tol)
        best = max(best, float(np.linalg.norm(psi_a - psi_b)) / denom)
    return best


@dataclass(frozen=True)
class StationaritySummary:
    min: float
    final: float
    first_round_below: int | None


def stationarity_series(log, tol: float) -> StationaritySummary:
    """Summarize the phi-gradient-norm column of a run log."""
    samples = [(m.round, m.phi_grad_norm) for m in log.rounds if m.phi_grad_norm is not None]
    if not samples:
        raise ValueError("no stationarity samples")
    values = [v for _, v in samples]
    first = next((r for r, v in samples if v <= tol), None)
    return StationaritySummary(min=min(values), final=values[-1], first_round_below=first)


# ------------------------- quadratic closed forms ------------------------- #


def _quad_bars(objectives: Sequence[QuadraticSaddle]):
    n = len(objectives)
    Abar = sum(o.A for o in objectives) / n
    Bbar = sum(o.B for o in objectives) / n
    Cbar = sum(o.C for o in objectives) / n
    abar = sum(o.a for o in objectives) / n
    cbar = sum(o.c for o in objectives) / n
    return Abar, Bbar, Cbar, abar, cbar


def quadratic_phi_hessian(objectives: Sequence[QuadraticSaddle]) -> np.ndarray:
    """Hessian of the max-function: Abar + Bbar Cbar^-1 Bbar'."""
    Abar, Bbar, Cbar, _, _ = _quad_bars(objectives)
    return Abar + Bbar @ np.linalg.solve(Cbar, Bbar.T)


def quadratic_phi_minimizer(objectives: Sequence[QuadraticSaddle]) -> Vector:
    """Brute-force reference: the unique stationary point of the max-function."""
    Abar, Bbar, Cbar, abar, cbar = _quad_bars(objectives)
    H = Abar + Bbar @ np.linalg.solve(Cbar, Bbar.T)
    rhs = -(abar + Bbar @ np.linalg.solve(Cbar, cbar))
    return vector(np.linalg.solve(H, rhs))


def quadratic_kappa_bound(objectives: Sequence[QuadraticSaddle]) -> float:
    """Closed-form operator norm of Cbar^-1 Bbar' (the true kappa)."""
    _, Bbar, Cbar, _, _ = _quad_bars(objectives)
    return float(np.linalg.norm(np.linalg.solve(Cbar, Bbar.T), 2))
