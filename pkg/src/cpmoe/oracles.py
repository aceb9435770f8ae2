"""Independent checks: multi-step GD on a quadratic and finite-difference gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Hashable

import numpy as np


def spectral_norm(H: np.ndarray, iters: int = 50, tol: float = 1e-10,
                  rng: np.random.Generator | None = None) -> float:
    """Largest singular value by power iteration."""
    rng = np.random.default_rng(0) if rng is None else rng
    v = rng.standard_normal(H.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = H.T @ (H @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(np.sqrt(nw))
        if abs(new - est) <= tol * max(new, 1.0):
            return new
        est = new
    return est


@dataclass
class QuadraticProblem:
    H: np.ndarray
    g: np.ndarray
    eta: float
    S: int

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64)
        d = self.g.shape[0]
        if self.H.shape != (d, d):
            raise ValueError(f"H shape {self.H.shape} incompatible with g of length {d}")
        if not np.allclose(self.H, self.H.T, atol=1e-12, rtol=0):
            raise ValueError("H is not symmetric")
        if np.linalg.eigvalsh(self.H)[0] < -1e-10:
            raise ValueError("H is not positive semidefinite")
        if self.S < 0:
            raise ValueError("S must be >= 0")
        norm = spectral_norm(self.H)
        if self.eta <= 0 or (norm > 0 and self.eta >= 2.0 / norm):
            raise ValueError(f"step size {self.eta} violates 0 < eta < 2/||H|| = {2.0 / norm if norm else np.inf}")

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, S: int) -> QuadraticProblem:
        M = rng.standard_normal((d, d))
        H = M.T @ M / d
        H = 0.5 * (H + H.T)
        return cls(H, rng.standard_normal(d), 1.0 / (2.0 * spectral_norm(H)), S)


def simulate_gd(p: QuadraticProblem) -> np.ndarray:
    """Run delta <- (I - eta H) delta - eta g from zero for S steps."""
    delta = np.zeros_like(p.g)
    for _ in range(p.S):
        delta = delta - p.eta * (p.g + p.H @ delta)
    return delta


def spectral_filter(lam, eta: float, S: int) -> np.ndarray:
    """q_S(lambda) = eta * sum_{s<S} (1 - eta lambda)^s, evaluated without cancellation."""
    lam = np.asarray(lam, dtype=np.float64)
    x = eta * lam
    out = np.full(lam.shape, eta * S)
    small = np.abs(x) < 0.5
    nz = x != 0.0
    m = small & nz
    out[m] = -np.expm1(S * np.log1p(-x[m])) / lam[m]
    m = ~small
    out[m] = (1.0 - np.power(1.0 - x[m], S)) / lam[m]
    return out


def closed_form_displacement(p: QuadraticProblem, method: str = "eig") -> np.ndarray:
    """-q_S(H) g, by eigendecomposition or by summing the matrix power series."""
    if not np.any(p.H):
        return -(p.eta * p.S) * p.g
    if method == "eig":
        lam, U = np.linalg.eigh(p.H)
        return -(U @ (spectral_filter(lam, p.eta, p.S) * (U.T @ p.g)))
    if method == "series":
        acc = np.zeros_like(p.g)
        term = p.g.copy()
        for _ in range(p.S):
            acc += term
            term = term - p.eta * (p.H @ term)
        return -p.eta * acc
    raise ValueError(f"unknown method {method!r}")


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a - b))


class UnstableRouting(RuntimeError):
    """A finite-difference probe changed the top-k selection."""


def gradcheck(loss: Callable[[], float], theta: np.ndarray, grad: np.ndarray, step: float = 1e-5,
              selection: Callable[[], Hashable] | None = None,
              indices=None) -> float:
    """Max relative error between ``grad`` and central differences of ``loss``.

    ``theta`` is perturbed in place (and restored); ``loss`` must read it.
    When ``selection`` is given, any change of its value under a probe raises
    :class:`UnstableRouting`.
    """
    if not np.isfinite(loss()):
        raise FloatingPointError("loss is not finite at the evaluation point")
    base = selection() if selection is not None else None
    flat = theta.reshape(-1)
    gflat = np.asarray(grad).reshape(-1)
    probe = range(flat.size) if indices is None else indices
    worst = 0.0
    for k in probe:
        orig = flat[k]
        flat[k] = orig + step
        fp = loss()
        sp = selection() if selection is not None else None
        flat[k] = orig - step
        fm = loss()
        sm = selection() if selection is not None else None
        flat[k] = orig
        if selection is not None and (sp != base or sm != base):
            raise UnstableRouting(f"routing changed when probing entry {k}")
        num = (fp - fm) / (2.0 * step)
        a = gflat[k]
        worst = max(worst, float(abs(a - num) / max(abs(a), abs(num), 1e-8)))
    return worst


def gradcheck_resampled(build: Callable[[int], tuple], step: float = 1e-5, attempts: int = 10) -> float:
    """Retry :func:`gradcheck` at fresh points while routing is unstable.

    ``build(attempt)`` returns ``(loss, theta, grad, selection)``.
    """
    for attempt in range(attempts + 1):
        loss, theta, grad, selection = build(attempt)
        try:
            return gradcheck(loss, theta, grad, step, selection)
        except UnstableRouting:
            continue
    raise UnstableRouting(f"routing unstable at all {attempts + 1} sampled points")


def objective_gradcheck(model, X, y, cons=None, h=None, lam=None, gamma=None,
                        step: float = 1e-5, groups=("A", "B", "W_gate")) -> dict[str, float]:
    """Finite-difference check of the full training objective for each trainable group."""
    from .trainer import compute_objective

    obj = compute_objective(model, X, y, cons, h, lam, gamma)
    params = model.layer.params()

    def loss():
        return compute_objective(model, X, y, cons, h, lam, gamma).total

    def selection():
        d = model.forward(X, h).decision
        return d.selected.tobytes() + d.native_selected.tobytes()

    return {g: gradcheck(loss, params[g], obj.grads[g], step, selection) for g in groups}


def tiny_objective_setup(seed: int = 0, n_tokens: int = 16):
    """Seeded tiny model (d=8, n=3, K=2, r=2) with live importance, snapshot and CP bias.

    Returns ``(model, X, y, cons, h)``. The stable experts are moved away
    from the snapshot so the regulariser and its gradient are nonzero.
    """
    from .consolidation import ConsolidationState, accumulate_importance, snapshot_experts
    from .moe import ModelConfig, MoeClassifier
    from .probe import consistency_scores, finalize_importance, warmup_transient

    cfg = ModelConfig(d_in=8, d_hidden=8, n_classes=3, n_experts=3, expert_rank=2, top_k=2,
                      lora_dropout=0.0, warmup_lr=1.0, warmup_batch=8, seed=seed)
    rng = np.random.default_rng([seed, 11])
    model = MoeClassifier.init(cfg, rng)
    model.layer.B[...] = rng.normal(0.0, 0.3, size=model.layer.B.shape)
    X = rng.standard_normal((n_tokens, cfg.d_in))
    y = rng.integers(0, cfg.n_classes, size=n_tokens)
    te, traj, buf = warmup_transient(model, X, y, cfg.warmup_lr, cfg.warmup_batch, rng)
    h = consistency_scores(buf)
    cons = ConsolidationState.empty(model.layer)
    accumulate_importance(cons, finalize_importance(traj, te, cfg.damping), h)
    snapshot_experts(cons, model.layer)
    model.layer.A += rng.normal(0.0, 0.02, size=model.layer.A.shape)
    model.layer.B += rng.normal(0.0, 0.02, size=model.layer.B.shape)
    model.layer.W_gate += rng.normal(0.0, 0.1, size=model.layer.W_gate.shape)
    return model, X, y, cons, h


def tiny_objective_gradcheck(seed: int = 0, lam: float = 5e3, gamma: float = 0.1,
                             step: float = 1e-5, attempts: int = 10) -> tuple[dict[str, float], int]:
    """Gradient check of the full objective on :func:`tiny_objective_setup`.

    Seeds whose probes flip the routing are skipped. Returns the per-group
    errors and the seed that was used.
    """
    for k in range(attempts + 1):
        model, X, y, cons, h = tiny_objective_setup(seed + k)
        try:
            return objective_gradcheck(model, X, y, cons, h, lam, gamma, step), seed + k
        except UnstableRouting:
            continue
    raise UnstableRouting(f"routing unstable for seeds {seed}..{seed + attempts}")
