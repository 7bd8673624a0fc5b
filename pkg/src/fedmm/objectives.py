"""Local minimax objectives: quadratic saddles and the domain-adaptation toy.

Both families expose value / grad_omega / grad_psi on flat parameter vectors.
The quadratic family is the closed-form-verifiable workhorse:

    f(omega, psi) = 1/2 om'A om + om'B ps - 1/2 ps'C ps + a'om + c'ps

with C positive definite, so the inner maximizer has the closed form
psi*(omega) = Cbar^-1 (Bbar' omega + cbar) when averaged over clients.

The domain-adaptation objective is the smallest model with the split between
a minimized block (linear extractor W and softmax predictor V) and a
maximized block (logistic domain classifier u): labeled points contribute
cross-entropy plus nu*log(1 - h(z)), unlabeled points contribute
nu*log(h(z)), with z = W x the extracted feature.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedmm.core import ConvergenceError, Vector, vector

SOURCE = 0
TARGET = 1
UNLABELED = -1


class LocalObjective(ABC):
    """Deterministic full-batch objective f_i(omega, psi) with analytic gradients."""

    @property
    @abstractmethod
    def dims(self) -> tuple[int, int]:
        """(d1, d2) = (len(omega), len(psi))."""

    @abstractmethod
    def value(self, omega: Vector, psi: Vector) -> float: ...

    @abstractmethod
    def grad_omega(self, omega: Vector, psi: Vector) -> Vector: ...

    @abstractmethod
    def grad_psi(self, omega: Vector, psi: Vector) -> Vector: ...


# --------------------------- quadratic family --------------------------- #


@dataclass(frozen=True)
class QuadraticSaddleSpec:
    """Matrices of one client's quadratic saddle; A may be indefinite, C must be PD."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    a: Vector
    c: Vector


class QuadraticSaddle(LocalObjective):
    def __init__(self, spec: QuadraticSaddleSpec, min_curvature: float = 0.0):
        A = np.array(spec.A, dtype=np.float64)
        B = np.array(spec.B, dtype=np.float64)
        C = np.array(spec.C, dtype=np.float64)
        a = vector(spec.a)
        c = vector(spec.c)
        d1, d2 = len(a), len(c)
        if A.shape != (d1, d1) or B.shape != (d1, d2) or C.shape != (d2, d2):
            raise ValueError(
                f"inconsistent shapes: A{A.shape} B{B.shape} C{C.shape} a({d1},) c({d2},)"
            )
        if not np.allclose(A, A.T, atol=1e-12):
            raise ValueError("A must be symmetric")
        if not np.allclose(C, C.T, atol=1e-12):
            raise ValueError("C must be symmetric")
        lam_min = float(np.linalg.eigvalsh(C).min())
        if lam_min <= min_curvature:
            raise ValueError(
                f"C is not positive definite enough: smallest eigenvalue {lam_min:.6e} "
                f"(required > {min_curvature:.6e})"
            )
        for m in (A, B, C):
            m.flags.writeable = False
        self.A, self.B, self.C, self.a, self.c = A, B, C, a, c
        self._dims = (d1, d2)

    @property
    def dims(self) -> tuple[int, int]:
        return self._dims

    def value(self, omega: Vector, psi: Vector) -> float:
        return float(
            0.5 * omega @ self.A @ omega
            + omega @ self.B @ psi
            - 0.5 * psi @ self.C @ psi
            + self.a @ omega
            + self.c @ psi
        )

    def grad_omega(self, omega: Vector, psi: Vector) -> Vector:
        return self.A @ omega + self.B @ psi + self.a

    def grad_psi(self, omega: Vector, psi: Vector) -> Vector:
        return self.B.T @ omega - self.C @ psi + self.c

    def strong_concavity_modulus(self) -> float:
        """Curvature bound B of the psi block: smallest eigenvalue of C."""
        return float(np.linalg.eigvalsh(self.C).min())

    def lipschitz_bounds(self) -> dict[str, float]:
        """Operator-norm gradient Lipschitz constants L11, L12, L21, L22."""
        nB = float(np.linalg.norm(self.B, 2))
        return {
            "L11": float(np.linalg.norm(self.A, 2)),
            "L12": nB,
            "L21": nB,
            "L22": float(np.linalg.norm(self.C, 2)),
        }


def make_quadratic_client(spec: QuadraticSaddleSpec, min_curvature: float = 0.0) -> QuadraticSaddle:
    return QuadraticSaddle(spec, min_curvature=min_curvature)


# ----------------------- domain-adaptation family ----------------------- #


@dataclass(frozen=True)
class ModelLayout:
    """Block layout of the flat parameter vectors.

    omega = [W (feat_dim x in_dim, row-major), V (n_classes x feat_dim, row-major)]
    psi   = [u (feat_dim,)]
    """

    in_dim: int
    feat_dim: int
    n_classes: int

    @property
    def d1(self) -> int:
        return self.feat_dim * self.in_dim + self.n_classes * self.feat_dim

    @property
    def d2(self) -> int:
        return self.feat_dim

    def unpack_omega(self, omega: Vector) -> tuple[np.ndarray, np.ndarray]:
        nw = self.feat_dim * self.in_dim
        W = omega[:nw].reshape(self.feat_dim, self.in_dim)
        V = omega[nw:].reshape(self.n_classes, self.feat_dim)
        return W, V

    def pack_omega(self, W: np.ndarray, V: np.ndarray) -> Vector:
        return vector(np.concatenate([W.reshape(-1), V.reshape(-1)]))


@dataclass
class DomainAdaptDataset:
    """Feature matrix plus per-point labels and domain flags.

    domain is SOURCE (0) or TARGET (1); labels are class indices on source
    points and UNLABELED (-1) on target points. A holdout dataset (harness-only
    evaluation knowledge) may carry ground-truth labels on target points.
    """

    X: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    holdout: bool = False

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype=np.int64)
        n = len(self.X)
        if self.y.shape != (n,) or self.domain.shape != (n,):
            raise ValueError("X, y, domain must have matching first dimension")
        if not np.isin(self.domain, (SOURCE, TARGET)).all():
            raise ValueError("domain flags must be SOURCE (0) or TARGET (1)")
        if (self.y[self.domain == SOURCE] < 0).any():
            raise ValueError("every source point must carry a label")
        if not self.holdout and (self.y[self.domain == TARGET] != UNLABELED).any():
            raise ValueError("target points must be unlabeled (-1)")

    def __len__(self) -> int:
        return len(self.X)

    def subset(self, idx: np.ndarray) -> "DomainAdaptDataset":
        return DomainAdaptDataset(self.X[idx], self.y[idx], self.domain[idx], self.holdout)

    def sample(self, rng: np.random.Generator, batch_size: int) -> "DomainAdaptDataset":
        """Seeded minibatch (without replacement); full batch is the default elsewhere."""
        n = len(self)
        k = min(batch_size, n)
        idx = rng.choice(n, size=k, replace=False)
        return self.subset(np.sort(idx))


def _softplus(t: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, t)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return np.exp(-_softplus(-t))


class DomainAdaptObjective(LocalObjective):
    """DANN-style adversarial objective on one client's shard, full-batch."""

    def __init__(
        self,
        dataset: DomainAdaptDataset,
        nu: float,
        layout: ModelLayout,
        alpha: float | None = None,
    ):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        if dataset.holdout:
            raise ValueError("holdout datasets are evaluation-only, not trainable")
        if dataset.X.shape[1] != layout.in_dim:
            raise ValueError(
                f"feature dim {dataset.X.shape[1]} does not match layout.in_dim {layout.in_dim}"
            )
        labeled = dataset.y[dataset.domain == SOURCE]
        if labeled.size and labeled.max() >= layout.n_classes:
            raise ValueError(
                f"label {labeled.max()} outside class range 0..{layout.n_classes - 1}"
            )
        self.dataset = dataset
        self.nu = float(nu)
        self.layout = layout
        self.alpha = 1.0 / len(dataset) if alpha is None else float(alpha)
        self._labeled = dataset.domain == SOURCE

    @property
    def dims(self) -> tuple[int, int]:
        return self.layout.d1, self.layout.d2

    def _forward(self, omega: Vector, psi: Vector):
        W, V = self.layout.unpack_omega(omega)
        Z = self.dataset.X @ W.T
        logits = Z @ V.T
        t = Z @ psi
        return W, V, Z, logits, t

    def value(self, omega: Vector, psi: Vector) -> float:
        _, _, _, logits, t = self._forward(omega, psi)
        lab = self._labeled
        total = 0.0
        if lab.any():
            lse = np.logaddexp.reduce(logits[lab], axis=1)
            picked = logits[lab, self.dataset.y[lab]]
            total += float(np.sum(lse - picked))            # cross-entropy
            total += float(np.sum(-self.nu * _softplus(t[lab])))    # nu*log(1-h)
        if (~lab).any():
            total += float(np.sum(-self.nu * _softplus(-t[~lab])))  # nu*log(h)
        return self.alpha * total

    def _backward(self, omega: Vector, psi: Vector):
        W, V, Z, logits, t = self._forward(omega, psi)
        lab = self._labeled
        n, _ = Z.shape
        s = _sigmoid(t)
        dlogits = np.zeros_like(logits)
        if lab.any():
            shifted = logits[lab] - logits[lab].max(axis=1, keepdims=True)
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(lab.sum()), self.dataset.y[lab]] -= 1.0
            dlogits[lab] = p
        dt = np.where(lab, -self.nu * s, self.nu * (1.0 - s))
        return W, V, Z, dlogits, dt

    def grad_omega(self, omega: Vector, psi: Vector) -> Vector:
        _, V, Z, dlogits, dt = self._backward(omega, psi)
        gV = self.alpha * (dlogits.T @ Z)
        dZ = dlogits @ V + dt[:, None] * psi[None, :]
        gW = self.alpha * (dZ.T @ self.dataset.X)
        return self.layout.pack_omega(gW, gV)

    def grad_psi(self, omega: Vector, psi: Vector) -> Vector:
        _, _, Z, _, dt = self._backward(omega, psi)
        return vector(self.alpha * (Z.T @ dt))

    def predict(self, omega: Vector, X: np.ndarray) -> np.ndarray:
        """Predictor argmax over classes; ties resolve to the lowest index."""
        W, V = self.layout.unpack_omega(omega)
        logits = (X @ W.T) @ V.T
        return np.argmax(logits, axis=1)

    def ascent_curvature_bound(self, omega: Vector) -> float:
        """Upper bound on the psi-Hessian norm at fixed omega (for step sizing)."""
        W, _ = self.layout.unpack_omega(omega)
        Z = self.dataset.X @ W.T
        gram = self.alpha * (Z.T @ Z)
        return 0.25 * self.nu * float(np.linalg.norm(gram, 2))


def make_domain_adapt_client(
    dataset: DomainAdaptDataset,
    nu: float,
    layout: ModelLayout,
    alpha: float | None = None,
) -> DomainAdaptObjective:
    return DomainAdaptObjective(dataset, nu, layout, alpha=alpha)


# ----------------------------- global views ----------------------------- #


class MeanObjective(LocalObjective):
    """Uniform average of client objectives: the pooled/global f."""

    def __init__(self, parts: Sequence[LocalObjective]):
        if not parts:
            raise ValueError("MeanObjective needs at least one objective")
        dims = parts[0].dims
        if any(p.dims != dims for p in parts):
            raise ValueError("all client objectives must share (d1, d2)")
        self.parts = list(parts)
        self._dims = dims

    @property
    def dims(self) -> tuple[int, int]:
        return self._dims

    def value(self, omega: Vector, psi: Vector) -> float:
        return sum(p.value(omega, psi) for p in self.parts) / len(self.parts)

    def grad_omega(self, omega: Vector, psi: Vector) -> Vector:
        g = self.parts[0].grad_omega(omega, psi).copy()
        for p in self.parts[1:]:
            g += p.grad_omega(omega, psi)
        return g / len(self.parts)

    def grad_psi(self, omega: Vector, psi: Vector) -> Vector:
        g = self.parts[0].grad_psi(omega, psi).copy()
        for p in self.parts[1:]:
            g += p.grad_psi(omega, psi)
        return g / len(self.parts)


def inner_max(
    objectives: Sequence[LocalObjective],
    omega: Vector,
    tol: float,
    method: str = "auto",
    max_iters: int = 100_000,
    psi0: Vector | None = None,
) -> Vector:
    """Maximize the averaged objective over psi at fixed omega.

    Quadratic clients get the closed form psibar = Cbar^-1 (Bbar' omega + cbar);
    anything else falls back to gradient ascent with a curvature-derived step,
    raising ConvergenceError (with the final gradient norm) at the cap.
    """
    all_quadratic = all(isinstance(o, QuadraticSaddle) for o in objectives)
    if method not in ("auto", "closed_form", "gradient_ascent"):
        raise ValueError(f"unknown inner_max method {method!r}")
    if method == "closed_form" and not all_quadratic:
        raise ValueError("closed_form inner_max requires quadratic clients")

    if all_quadratic and method in ("auto", "closed_form"):
        n = len(objectives)
        Cbar = sum(o.C for o in objectives) / n
        Bbar = sum(o.B for o in objectives) / n
        cbar = sum(o.c for o in objectives) / n
        psi = np.linalg.solve(Cbar, Bbar.T @ omega + cbar)
        return vector(psi)

    mean = MeanObjective(objectives)
    d2 = mean.dims[1]
    psi = np.array(psi0, dtype=np.float64) if psi0 is not None else np.zeros(d2)

    if all_quadratic:
        curv = float(np.linalg.norm(sum(o.C for o in objectives) / len(objectives), 2))
    else:
        curv = max(
            o.ascent_curvature_bound(omega) if isinstance(o, DomainAdaptObjective) else 1.0
            for o in objectives
        )
    step = 1.0 / max(curv, 1e-12)

    g = mean.grad_psi(omega, psi)
    gnorm = float(np.linalg.norm(g))
    for _ in range(max_iters):
        if gnorm <= tol:
            return vector(psi)
        psi = psi + step * g
        g = mean.grad_psi(omega, psi)
        gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return vector(psi)
    raise ConvergenceError("inner_max gradient ascent", gnorm, max_iters)


def phi_value_and_grad(
    objectives: Sequence[LocalObjective],
    omega: Vector,
    tol: float,
    **inner_kwargs,
) -> tuple[float, Vector]:
    """Max-function value and its gradient at omega (Danskin: grad at the maximizer)."""
    psi_star = inner_max(objectives, omega, tol, **inner_kwargs)
    mean = MeanObjective(objectives)
    return mean.value(omega, psi_star), mean.grad_omega(omega, psi_star)


# ------------------------- plain-text instance files ------------------------- #
#
# Both formats share the conventions: '#' starts a comment, tokens are
# whitespace-separated, matrices are row-major, and the first three tokens are
# the header "d1 d2 N".
#
# Quadratic instance file: header d1 d2 N, then per client
#   A (d1*d1), B (d1*d2), C (d2*d2), a (d1), c (d2).
# Dataset file: header d1 d2 N with d1 = feature dim, d2 = number of classes,
#   then N records "domain label x_1 ... x_d1" (domain 0=source 1=target,
#   label -1 = unlabeled).


def _tokens(path: str | Path) -> list[str]:
    out: list[str] = []
    for line in Path(path).read_text().splitlines():
        body = line.split("#", 1)[0]
        out.extend(body.split())
    return out


def load_quadratic_specs(path: str | Path) -> list[QuadraticSaddleSpec]:
    toks = _tokens(path)
    if len(toks) < 3:
        raise ValueError(f"{path}: missing 'd1 d2 N' header")
    d1, d2, n = (int(t) for t in toks[:3])
    per = d1 * d1 + d1 * d2 + d2 * d2 + d1 + d2
    body = toks[3:]
    if len(body) != n * per:
        raise ValueError(f"{path}: expected {n * per} values, found {len(body)}")
    vals = np.array([float(t) for t in body])
    specs = []
    for i in range(n):
        block = vals[i * per : (i + 1) * per]
        pos = 0

        def take(k: int):
            nonlocal pos
            out = block[pos : pos + k]
            pos += k
            return out

        specs.append(
            QuadraticSaddleSpec(
                A=take(d1 * d1).reshape(d1, d1),
                B=take(d1 * d2).reshape(d1, d2),
                C=take(d2 * d2).reshape(d2, d2),
                a=vector(take(d1)),
                c=vector(take(d2)),
            )
        )
    return specs


def save_quadratic_specs(path: str | Path, specs: Sequence[QuadraticSaddleSpec]) -> None:
    d1, d2 = len(specs[0].a), len(specs[0].c)
    lines = [f"{d1} {d2} {len(specs)}"]
    for s in specs:
        for block in (s.A, s.B, s.C, s.a, s.c):
            lines.append(" ".join(repr(float(v)) for v in np.asarray(block).reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> tuple[DomainAdaptDataset, int]:
    """Read a dataset file; returns (dataset, n_classes)."""
    toks = _tokens(path)
    if len(toks) < 3:
        raise ValueError(f"{path}: missing 'd1 d2 N' header")
    d1, n_classes, n = (int(t) for t in toks[:3])
    body = toks[3:]
    per = 2 + d1
    if len(body) != n * per:
        raise ValueError(f"{path}: expected {n * per} values, found {len(body)}")
    dom = np.empty(n, dtype=np.int64)
    y = np.empty(n, dtype=np.int64)
    X = np.empty((n, d1))
    for i in range(n):
        rec = body[i * per : (i + 1) * per]
        dom[i] = int(rec[0])
        y[i] = int(rec[1])
        X[i] = [float(v) for v in rec[2:]]
    return DomainAdaptDataset(X, y, dom), n_classes


def save_dataset(path: str | Path, ds: DomainAdaptDataset, n_classes: int) -> None:
    lines = [f"{ds.X.shape[1]} {n_classes} {len(ds)}"]
    for i in range(len(ds)):
        xs = " ".join(repr(float(v)) for v in ds.X[i])
        lines.append(f"{int(ds.domain[i])} {int(ds.y[i])} {xs}")
    Path(path).write_text("\n".join(lines) + "\n")
