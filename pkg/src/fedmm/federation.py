"""Round-based client/server simulation: partitioning, run loop, metrics, CSV.

The round loop is a barrier-synchronized fan-out/fan-in; metrics and the
communication ledger are recorded once per completed round. Everything is
deterministic given (config, seed): the only randomness flows through child
seeds spawned from the config seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from fedmm.core import (
    ClientState,
    ConvergenceError,
    DivergenceError,
    HyperParams,
    PrimalDualPair,
    ServerState,
    Vector,
    vector,
    zeros,
)
from fedmm.objectives import (
    SOURCE,
    TARGET,
    DomainAdaptDataset,
    DomainAdaptObjective,
    LocalObjective,
    MeanObjective,
    ModelLayout,
    QuadraticSaddle,
    load_dataset,
    load_quadratic_specs,
    make_domain_adapt_client,
    phi_value_and_grad,
)
from fedmm.optim import OptimizerKind, run_round
from fedmm import problems


class PartitionMode(Enum):
    TWO_CLIENT_P = "two_client_p"
    ONE_SOURCE_ONE_TARGET = "one_source_one_target"
    ONE_SOURCE_TWO_TARGET = "one_source_two_target"
    TWO_SOURCE_ONE_TARGET = "two_source_one_target"

    @classmethod
    def parse(cls, name: str) -> "PartitionMode":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown partition mode {name!r} (expected: {valid})") from None


_MODE_CLIENTS = {
    PartitionMode.TWO_CLIENT_P: 2,
    PartitionMode.ONE_SOURCE_ONE_TARGET: 2,
    PartitionMode.ONE_SOURCE_TWO_TARGET: 3,
    PartitionMode.TWO_SOURCE_ONE_TARGET: 3,
}


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int = 2
    p: float = 0.5
    mode: PartitionMode = PartitionMode.TWO_CLIENT_P

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be >= 1, got {self.n_clients}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        want = _MODE_CLIENTS[self.mode]
        if self.n_clients != want:
            raise ValueError(
                f"mode {self.mode.value} requires n_clients={want}, got {self.n_clients}"
            )


def _split_uniform(idx: np.ndarray, parts: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(idx)
    return [np.sort(chunk) for chunk in np.array_split(perm, parts)]


def partition_label_shift(
    dataset: DomainAdaptDataset, spec: PartitionSpec, rng: np.random.Generator
) -> list[DomainAdaptDataset]:
    """Disjointly cover the dataset across clients with label-shift parameter p.

    TWO_CLIENT_P gives client 0 a uniform fraction p of the source points and
    (1-p) of the target points; client 1 gets the complement. p=1.0 fully
    separates the domains. The multi-client modes pin one domain per client
    group and split that group's pool uniformly.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    src = np.flatnonzero(dataset.domain == SOURCE)
    tgt = np.flatnonzero(dataset.domain == TARGET)

    if spec.mode is PartitionMode.TWO_CLIENT_P:
        n_src_1 = int(round(spec.p * len(src)))
        n_tgt_1 = int(round((1.0 - spec.p) * len(tgt)))
        src_perm = rng.permutation(src)
        tgt_perm = rng.permutation(tgt)
        one = np.sort(np.concatenate([src_perm[:n_src_1], tgt_perm[:n_tgt_1]]))
        two = np.sort(np.concatenate([src_perm[n_src_1:], tgt_perm[n_tgt_1:]]))
        groups = [one, two]
    elif spec.mode is PartitionMode.ONE_SOURCE_ONE_TARGET:
        groups = [src, tgt]
    elif spec.mode is PartitionMode.ONE_SOURCE_TWO_TARGET:
        groups = [src] + _split_uniform(tgt, 2, rng)
    elif spec.mode is PartitionMode.TWO_SOURCE_ONE_TARGET:
        groups = _split_uniform(src, 2, rng) + [tgt]
    else:  # pragma: no cover
        raise ValueError(f"unhandled mode {spec.mode}")

    for i, g in enumerate(groups):
        if len(g) == 0:
            raise ValueError(f"client {i} receives zero points (degenerate objective)")
    return [dataset.subset(g) for g in groups]


def evaluate_target_accuracy(
    objective: DomainAdaptObjective, omega: Vector, holdout: DomainAdaptDataset
) -> float:
    """Fraction of holdout points whose predictor argmax matches the true label.

    The holdout carries ground-truth labels the optimizers never see; argmax
    ties resolve to the lowest class index.
    """
    if len(holdout) == 0:
        raise ValueError("holdout is empty")
    if (holdout.y < 0).any():
        raise ValueError("holdout points must carry ground-truth labels")
    pred = objective.predict(omega, holdout.X)
    return float(np.mean(pred == holdout.y))


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    phi_grad_norm: float | None
    consensus_omega: float
    consensus_psi: float
    global_loss: float
    target_accuracy: float | None
    floats_communicated: int


CSV_HEADER = (
    "round,phi_grad_norm,consensus_omega,consensus_psi,"
    "global_loss,target_accuracy,floats_communicated"
)

# the metric oracle must never dominate a round: past this budget the sample
# degrades to an empty field instead
_PHI_ORACLE_ITER_CAP = 5000


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class RunLog:
    """Per-round metrics plus the config echo; serializes to the run CSV."""

    config_echo: dict
    seed: int
    rounds: list[RoundMetrics] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)

    def csv_text(self) -> str:
        lines = [CSV_HEADER]
        for m in self.rounds:
            lines.append(
                ",".join(
                    [
                        str(m.round),
                        _fmt(m.phi_grad_norm),
                        _fmt(m.consensus_omega),
                        _fmt(m.consensus_psi),
                        _fmt(m.global_loss),
                        _fmt(m.target_accuracy),
                        str(m.floats_communicated),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.csv_text())

    def final(self) -> RoundMetrics | None:
        return self.rounds[-1] if self.rounds else None


class ProblemKind(Enum):
    QUADRATIC = "quadratic"
    DOMAIN_ADAPT = "domain_adapt"

    @classmethod
    def parse(cls, name: str) -> "ProblemKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown problem {name!r} (expected: {valid})") from None


@dataclass(frozen=True)
class ExperimentConfig:
    optimizer: OptimizerKind
    problem: ProblemKind
    hyper: HyperParams = HyperParams()
    partition: PartitionSpec = PartitionSpec()
    seed: int = 0
    metrics_every: int = 1
    output_path: str = "run.csv"
    problem_file: str | None = None
    quad_n_clients: int = 3
    quad_d1: int = 4
    quad_d2: int = 3
    toy_n_per_domain: int = 60
    toy_holdout_n: int = 240
    batch_size: int = 0

    def __post_init__(self):
        if self.metrics_every < 1:
            raise ValueError(f"metrics_every must be >= 1, got {self.metrics_every}")
        if self.batch_size < 0:
            raise ValueError(f"batch_size must be >= 0, got {self.batch_size}")

    def echo(self) -> dict:
        d = {
            "optimizer": self.optimizer.value,
            "problem": self.problem.value,
            "seed": self.seed,
            "metrics_every": self.metrics_every,
            "output_path": self.output_path,
            "problem_file": self.problem_file,
            "problem.n_clients": self.quad_n_clients,
            "problem.d1": self.quad_d1,
            "problem.d2": self.quad_d2,
            "problem.n_per_domain": self.toy_n_per_domain,
            "problem.holdout_n": self.toy_holdout_n,
            "batch_size": self.batch_size,
            "partition.mode": self.partition.mode.value,
            "partition.n_clients": self.partition.n_clients,
            "partition.p": self.partition.p,
        }
        for k in (
            "mu1",
            "mu2",
            "eta1",
            "eta2",
            "eta3",
            "nu",
            "local_steps",
            "rounds",
            "prox_mu",
            "tol",
            "local_tol",
        ):
            d[f"hyper.{k}"] = getattr(self.hyper, k)
        return d


@dataclass
class _BuiltProblem:
    """Everything run_experiment needs after problem construction."""

    sim_objectives: list[LocalObjective]
    oracle_objectives: list[LocalObjective]
    init_pair: PrimalDualPair
    holdout: DomainAdaptDataset | None
    accuracy_objective: DomainAdaptObjective | None
    shards: list[DomainAdaptDataset] | None
    layout: ModelLayout | None


def _build_problem(config: ExperimentConfig, seed_seq: np.random.SeedSequence) -> _BuiltProblem:
    data_seq, init_seq, part_seq = seed_seq.spawn(3)

    if config.problem is ProblemKind.QUADRATIC:
        if config.problem_file:
            specs = load_quadratic_specs(config.problem_file)
        else:
            specs = problems.synthetic_quadratic_specs(
                config.quad_n_clients, config.quad_d1, config.quad_d2
            )
        objs: list[LocalObjective] = [QuadraticSaddle(s) for s in specs]
        d1, d2 = objs[0].dims
        init = PrimalDualPair(zeros(d1), zeros(d2))
        if config.optimizer is OptimizerKind.CENTRAL_GDA:
            sim: list[LocalObjective] = [MeanObjective(objs)]
        else:
            sim = objs
        return _BuiltProblem(sim, objs, init, None, None, None, None)

    # domain adaptation
    if config.problem_file:
        dataset, n_classes = load_dataset(config.problem_file)
        holdout = None
        layout = ModelLayout(dataset.X.shape[1], dataset.X.shape[1], n_classes)
    else:
        dataset, holdout, layout = problems.domain_shift_toy(
            np.random.Generator(np.random.PCG64(data_seq)),
            n_per_domain=config.toy_n_per_domain,
            holdout_n=config.toy_holdout_n,
        )

    pooled = make_domain_adapt_client(dataset, config.hyper.nu, layout)
    init_rng = np.random.Generator(np.random.PCG64(init_seq))
    init = PrimalDualPair(
        vector(0.1 * init_rng.standard_normal(layout.d1)),
        vector(0.1 * init_rng.standard_normal(layout.d2)),
    )

    if config.optimizer is OptimizerKind.CENTRAL_GDA:
        return _BuiltProblem([pooled], [pooled], init, holdout, pooled, None, layout)

    part_rng = np.random.Generator(np.random.PCG64(part_seq))
    shards = partition_label_shift(dataset, config.partition, part_rng)
    objs = [make_domain_adapt_client(s, config.hyper.nu, layout) for s in shards]
    return _BuiltProblem(list(objs), list(objs), init, holdout, pooled, shards, layout)


def run_experiment(config: ExperimentConfig) -> RunLog:
    """Execute T rounds of the configured optimizer and record per-round metrics.

    phi_grad_norm is computed through the diagnostics oracle (which peeks at
    all clients' objectives) every metrics_every-th round and on the final
    round; an inner-max failure degrades it to None instead of aborting.
    """
    seed_seq = np.random.SeedSequence(config.seed)
    built = _build_problem(config, seed_seq)
    batch_seq = seed_seq.spawn(1)[0]

    hp = config.hyper.expanded(len(built.sim_objectives))
    server = ServerState(built.init_pair)
    clients = [
        ClientState.initial(i, obj, built.init_pair)
        for i, obj in enumerate(built.sim_objectives)
    ]
    n = len(clients)
    local_tol = hp.local_tol if hp.local_tol > 0 else None

    log = RunLog(config_echo=config.echo(), seed=config.seed)
    batch_rng = np.random.Generator(np.random.PCG64(batch_seq))

    for t in range(hp.rounds):
        t0 = time.perf_counter()
        if config.batch_size > 0 and built.shards is not None:
            # seeded minibatch mode: fresh per-round subsample of each shard
            clients = [
                replace(
                    c,
                    objective=make_domain_adapt_client(
                        shard.sample(batch_rng, config.batch_size), hp.nu, built.layout
                    ),
                )
                for c, shard in zip(clients, built.shards)
            ]
        try:
            clients = run_round(config.optimizer, clients, server, hp, local_tol=local_tol)
        except DivergenceError as e:
            raise DivergenceError(f"round {t}: {e.where}", e.step) from e

        gp = server.global_pair
        consensus_om = max(float(np.linalg.norm(c.pair.omega - gp.omega)) for c in clients)
        consensus_ps = max(float(np.linalg.norm(c.pair.psi - gp.psi)) for c in clients)
        global_loss = float(
            sum(o.value(gp.omega, gp.psi) for o in built.oracle_objectives)
            / len(built.oracle_objectives)
        )

        phi_grad_norm: float | None = None
        if t % config.metrics_every == 0 or t == hp.rounds - 1:
            try:
                _, phi_grad = phi_value_and_grad(
                    built.oracle_objectives, gp.omega, hp.tol, max_iters=_PHI_ORACLE_ITER_CAP
                )
                phi_grad_norm = float(np.linalg.norm(phi_grad))
            except ConvergenceError:
                phi_grad_norm = None

        accuracy: float | None = None
        if built.holdout is not None and built.accuracy_objective is not None:
            accuracy = evaluate_target_accuracy(
                built.accuracy_objective, gp.omega, built.holdout
            )

        log.rounds.append(
            RoundMetrics(
                round=t,
                phi_grad_norm=phi_grad_norm,
                consensus_omega=consensus_om,
                consensus_psi=consensus_ps,
                global_loss=global_loss,
                target_accuracy=accuracy,
                floats_communicated=server.floats_sent,
            )
        )
        log.wall_clock.append(time.perf_counter() - t0)

    return log
