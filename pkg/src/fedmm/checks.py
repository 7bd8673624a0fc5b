"""Built-in verification suite behind the `check` subcommand.

Each check runs on small fixed fixtures and either returns a detail string
(pass) or raises (fail); the runner traps exceptions so a bad fixture shows
up as a named failure instead of a crash.
"""

from __future__ import annotations

import numpy as np

from fedmm.core import ClientState, HyperParams, PrimalDualPair, ServerState, seeded_rng, vector
from fedmm.diagnostics import (
    estimate_kappa,
    finite_diff_grad,
    local_solve_error,
    quadratic_kappa_bound,
    run_identity_suite,
)
from fedmm.federation import PartitionMode, PartitionSpec, partition_label_shift
from fedmm.objectives import (
    MeanObjective,
    QuadraticSaddle,
    QuadraticSaddleSpec,
    inner_max,
    make_domain_adapt_client,
    make_quadratic_client,
)
from fedmm.optim import (
    OptimizerKind,
    centralized_gda_step,
    fedavg_gda_local,
    fedprox_gda_local,
    fedmm_local_round,
    run_round,
)
from fedmm.problems import domain_shift_toy, synthetic_quadratic_specs


def _rel_err(got: np.ndarray, want: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(want)), 1e-12)
    return float(np.linalg.norm(np.asarray(got) - np.asarray(want))) / denom


def _grad_check(obj, rng, n_probes: int, tol: float = 1e-5, h: float = 1e-6) -> float:
    d1, d2 = obj.dims
    worst = 0.0
    for _ in range(n_probes):
        om = vector(rng.standard_normal(d1))
        ps = vector(rng.standard_normal(d2))
        fd_om = finite_diff_grad(lambda v: obj.value(v, ps), om, h)
        fd_ps = finite_diff_grad(lambda v: obj.value(om, v), ps, h)
        worst = max(worst, _rel_err(obj.grad_omega(om, ps), fd_om))
        worst = max(worst, _rel_err(obj.grad_psi(om, ps), fd_ps))
    if worst > tol:
        raise AssertionError(f"gradient mismatch: relative error {worst:.3e} > {tol}")
    return worst


def check_quadratic_gradients() -> str:
    objs = [QuadraticSaddle(s) for s in synthetic_quadratic_specs(3)]
    rng = seeded_rng(11)
    worst = max(_grad_check(o, rng, 7) for o in objs)
    return f"max rel err {worst:.2e}"


def check_domain_adapt_gradients() -> str:
    train, _, layout = domain_shift_toy(seeded_rng(12), n_per_domain=20, holdout_n=4)
    obj = make_domain_adapt_client(train, nu=0.5, layout=layout)
    worst = _grad_check(obj, seeded_rng(13), 10)
    return f"max rel err {worst:.2e}"


def check_inner_max_paths_agree() -> str:
    objs = [QuadraticSaddle(s) for s in synthetic_quadratic_specs(3)]
    rng = seeded_rng(14)
    om = vector(rng.standard_normal(objs[0].dims[0]))
    closed = inner_max(objs, om, tol=1e-12, method="closed_form")
    ascent = inner_max(objs, om, tol=1e-10, method="gradient_ascent")
    gap = float(np.linalg.norm(closed - ascent))
    if gap > 1e-8:
        raise AssertionError(f"inner_max paths disagree by {gap:.3e}")
    return f"paths agree to {gap:.2e}"


def check_danskin_stationarity() -> str:
    objs = [QuadraticSaddle(s) for s in synthetic_quadratic_specs(3)]
    mean = MeanObjective(objs)
    rng = seeded_rng(15)
    om = vector(rng.standard_normal(objs[0].dims[0]))
    psi_star = inner_max(objs, om, tol=1e-12)
    g = mean.grad_psi(om, psi_star)
    worst = 0.0
    for _ in range(10):
        v = rng.standard_normal(len(psi_star))
        worst = max(worst, abs(float(g @ v)) / float(np.linalg.norm(v)))
    if worst > 1e-9:
        raise AssertionError(f"inner maximizer not stationary: {worst:.3e}")
    return f"max directional derivative {worst:.2e}"


def check_identity_suite() -> str:
    objs = [QuadraticSaddle(s) for s in synthetic_quadratic_specs(3)]
    hp = HyperParams(eta1=0.2, eta2=0.2, eta3=1.0, local_steps=(20,), rounds=6)
    reports = run_identity_suite(objs, hp, rounds=6, local_tol=1e-12)
    bad = [r for r in reports if not r.passed]
    if bad:
        raise AssertionError(f"{len(bad)} identity failures, worst {max(r.residual_norm for r in bad):.3e}")
    return f"{len(reports)} identities hold, worst residual {max(r.residual_norm for r in reports):.2e}"


def check_dual_recovery() -> str:
    objs = [QuadraticSaddle(s) for s in synthetic_quadratic_specs(2)]
    hp = HyperParams(eta1=0.2, eta2=0.2)
    d1, d2 = objs[0].dims
    pair = PrimalDualPair(vector(np.zeros(d1)), vector(np.zeros(d2)))
    worst = 0.0
    for i, o in enumerate(objs):
        state = ClientState.initial(i, o, pair)
        new_state, _ = fedmm_local_round(state, pair, hp, t=0, local_tol=1e-12)
        worst = max(worst, local_solve_error(new_state))
    if worst > 1e-8:
        raise AssertionError(f"dual recovery residual {worst:.3e} > 1e-8")
    return f"worst residual {worst:.2e}"


def _bit_equal(a: PrimalDualPair, b: PrimalDualPair) -> bool:
    return np.array_equal(a.omega, b.omega) and np.array_equal(a.psi, b.psi)


def check_equiv_fedsgda_central() -> str:
    obj = QuadraticSaddle(synthetic_quadratic_specs(1)[0])
    d1, d2 = obj.dims
    pair = PrimalDualPair(vector(np.zeros(d1)), vector(np.zeros(d2)))
    hp = HyperParams(eta1=0.05, eta2=0.05)

    server = ServerState(pair)
    clients = [ClientState.initial(0, obj, pair)]
    central = pair
    for _ in range(100):
        clients = run_round(OptimizerKind.FEDSGDA, clients, server, hp)
        central = centralized_gda_step(obj, central, hp.eta1, hp.eta2)
        if not _bit_equal(server.global_pair, central):
            raise AssertionError("FedSGDA(N=1) diverged from centralized GDA")
    return "100 steps bit-exact"


def check_equiv_fedprox_fedavg() -> str:
    obj = QuadraticSaddle(synthetic_quadratic_specs(1)[0])
    d1, d2 = obj.dims
    rng = seeded_rng(16)
    pair = PrimalDualPair(vector(rng.standard_normal(d1)), vector(rng.standard_normal(d2)))
    hp = HyperParams(eta1=0.05, eta2=0.05, prox_mu=0.0, local_steps=(13,))
    a = fedavg_gda_local(obj, pair, hp, 0)
    b = fedprox_gda_local(obj, pair, hp, 0)
    if not (np.array_equal(a.omega_out, b.omega_out) and np.array_equal(a.psi_out, b.psi_out)):
        raise AssertionError("FedProxGDA(prox_mu=0) differs from FedAvgGDA")
    return "outputs bit-exact"


def check_equiv_fedavg_fedsgda() -> str:
    objs = [QuadraticSaddle(s) for s in synthetic_quadratic_specs(2)]
    d1, d2 = objs[0].dims
    pair = PrimalDualPair(vector(np.zeros(d1)), vector(np.zeros(d2)))
    hp = HyperParams(eta1=0.05, eta2=0.05, local_steps=(1,))

    server_a = ServerState(pair)
    clients_a = [ClientState.initial(i, o, pair) for i, o in enumerate(objs)]
    server_b = ServerState(pair)
    clients_b = [ClientState.initial(i, o, pair) for i, o in enumerate(objs)]
    for _ in range(50):
        clients_a = run_round(OptimizerKind.FEDAVG_GDA, clients_a, server_a, hp)
        clients_b = run_round(OptimizerKind.FEDSGDA, clients_b, server_b, hp)
        if not _bit_equal(server_a.global_pair, server_b.global_pair):
            raise AssertionError("FedAvgGDA(M=1) differs from FedSGDA")
    return "50 rounds bit-exact"


def check_stationary_saddle_fixed() -> str:
    # A=0, B=I, C=I, a=0, c=0: the origin is an exact per-client saddle.
    d = 3
    spec = QuadraticSaddleSpec(
        A=np.zeros((d, d)), B=np.eye(d), C=np.eye(d), a=vector(np.zeros(d)), c=vector(np.zeros(d))
    )
    objs = [QuadraticSaddle(spec) for _ in range(2)]
    pair = PrimalDualPair(vector(np.zeros(d)), vector(np.zeros(d)))
    hp = HyperParams(eta1=0.1, eta2=0.1, local_steps=(5,))
    for kind in (
        OptimizerKind.FEDMM,
        OptimizerKind.FEDSGDA,
        OptimizerKind.FEDAVG_GDA,
        OptimizerKind.FEDPROX_GDA,
    ):
        server = ServerState(pair)
        clients = [ClientState.initial(i, o, pair) for i, o in enumerate(objs)]
        clients = run_round(kind, clients, server, hp)
        if not _bit_equal(server.global_pair, pair):
            raise AssertionError(f"{kind.value} moved an exact stationary saddle")
        if any(float(np.linalg.norm(c.lam)) + float(np.linalg.norm(c.beta)) != 0.0 for c in clients):
            raise AssertionError(f"{kind.value} perturbed zero duals at a saddle")
    central = centralized_gda_step(MeanObjective(objs), pair, hp.eta1, hp.eta2)
    if not _bit_equal(central, pair):
        raise AssertionError("central_gda moved an exact stationary saddle")
    return "all optimizers leave the saddle fixed"


def check_kappa_bound() -> str:
    objs = [QuadraticSaddle(s) for s in synthetic_quadratic_specs(3)]
    rng = seeded_rng(17)
    d1 = objs[0].dims[0]
    pairs = [
        (vector(rng.standard_normal(d1)), vector(rng.standard_normal(d1))) for _ in range(10)
    ]
    est = estimate_kappa(objs, pairs, tol=1e-12)
    bound = quadratic_kappa_bound(objs)
    if est > bound + 1e-8:
        raise AssertionError(f"kappa estimate {est:.6f} exceeds closed form {bound:.6f}")
    return f"estimate {est:.4f} <= bound {bound:.4f}"


def check_partition_cover() -> str:
    train, _, _ = domain_shift_toy(seeded_rng(18), n_per_domain=40, holdout_n=4)
    spec = PartitionSpec(n_clients=2, p=0.75, mode=PartitionMode.TWO_CLIENT_P)
    shards_a = partition_label_shift(train, spec, seeded_rng(99))
    shards_b = partition_label_shift(train, spec, seeded_rng(99))
    for sa, sb in zip(shards_a, shards_b):
        if not np.array_equal(sa.X, sb.X):
            raise AssertionError("partition is not deterministic for a fixed seed")
    total = sum(len(s) for s in shards_a)
    if total != len(train):
        raise AssertionError(f"partition does not cover: {total} != {len(train)}")
    merged = np.sort(np.concatenate([s.X[:, 0] for s in shards_a]))
    if not np.array_equal(merged, np.sort(train.X[:, 0])):
        raise AssertionError("partition multiset differs from input")
    return f"{len(shards_a)} shards cover {total} points deterministically"


def check_non_pd_rejected() -> str:
    spec = QuadraticSaddleSpec(
        A=np.zeros((1, 1)),
        B=np.ones((1, 1)),
        C=np.array([[-1.0]]),
        a=vector([0.0]),
        c=vector([0.0]),
    )
    try:
        make_quadratic_client(spec)
    except ValueError as e:
        if "eigenvalue" not in str(e):
            raise AssertionError(f"wrong error for non-PD C: {e}")
        return "non-PD C rejected with eigenvalue report"
    raise AssertionError("non-PD C was accepted")


def builtin_checks() -> list[tuple[str, "object"]]:
    return [
        ("quadratic_gradients", check_quadratic_gradients),
        ("domain_adapt_gradients", check_domain_adapt_gradients),
        ("inner_max_paths_agree", check_inner_max_paths_agree),
        ("danskin_stationarity", check_danskin_stationarity),
        ("identity_suite", check_identity_suite),
        ("dual_recovery", check_dual_recovery),
        ("equiv_fedsgda_central", check_equiv_fedsgda_central),
        ("equiv_fedprox_fedavg", check_equiv_fedprox_fedavg),
        ("equiv_fedavg_fedsgda", check_equiv_fedavg_fedsgda),
        ("stationary_saddle_fixed", check_stationary_saddle_fixed),
        ("kappa_bound", check_kappa_bound),
        ("partition_cover", check_partition_cover),
        ("non_pd_rejected", check_non_pd_rejected),
    ]


def run_builtin_checks(verbose_print=print) -> bool:
    """Execute every check, print one line each, return overall pass/fail."""
    all_ok = True
    for name, fn in builtin_checks():
        try:
            detail = fn()
            verbose_print(f"PASS  {name:<26} {detail}")
        except Exception as e:  # report, never crash the suite
            all_ok = False
            verbose_print(f"FAIL  {name:<26} {e}")
    return all_ok
