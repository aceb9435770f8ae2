"""Transient-expert probing: warm-up, path-integral importance and CKA scores."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .moe import LoraExpert, ModelConfig, MoeClassifier, cross_entropy
from .numerics import ShapeError, center_columns


class ZeroRepresentationWarning(UserWarning):
    """A CKA operand had no signal; the score was defined as 0."""


@dataclass
class TransientExpert(LoraExpert):
    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> TransientExpert:
        bound = 1.0 / np.sqrt(cfg.d_in)
        A = rng.uniform(-bound, bound, size=(cfg.expert_rank, cfg.d_in))
        return cls(A, np.zeros((cfg.d_hidden, cfg.expert_rank)))

    def copy(self) -> TransientExpert:
        return TransientExpert(self.A.copy(), self.B.copy())


@dataclass
class WarmupTrajectory:
    phi0: TransientExpert
    omega_A: np.ndarray
    omega_B: np.ndarray
    eta: float
    steps_taken: int = 0
    snapshots: list[TransientExpert] | None = None  # phi_0..phi_S when recorded
    losses: list[float] = field(default_factory=list)


@dataclass
class ImportanceMask:
    omega_A: np.ndarray
    omega_B: np.ndarray


@dataclass
class ActivationBuffer:
    Z_te: np.ndarray  # (N, d_out)
    Z_se: list[np.ndarray]  # one (N, d_out) matrix per stable expert

    @property
    def n_tokens(self) -> int:
        return self.Z_te.shape[0]


def warmup_transient(model: MoeClassifier, X, y, eta: float, batch_size: int,
                     rng: np.random.Generator, record: bool = False):
    """Plain gradient descent on a fresh transient expert.

    The stable experts, router and backbone are read but never written; the
    stable MoE path stays in the forward pass with unbiased routing. One step
    is taken per consecutive batch of the warm-up samples.

    Returns ``(te, trajectory, buffer)``. The activation buffer holds the
    final transient expert's outputs and every stable expert's outputs on all
    warm-up samples, evaluated densely (ignoring routing).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValueError("empty warm-up stream")
    if eta <= 0:
        raise ValueError("warm-up learning rate must be > 0")
    te = TransientExpert.init(model.config, rng)
    traj = WarmupTrajectory(te.copy(), np.zeros_like(te.A), np.zeros_like(te.B), eta,
                            snapshots=[te.copy()] if record else None)
    for start in range(0, len(X), batch_size):
        xb, yb = X[start:start + batch_size], y[start:start + batch_size]
        fw = model.forward(xb, te=te)
        loss, dlogits = cross_entropy(fw.logits, yb)
        g = model.backward(fw, dlogits, te=te, stable=False)
        if not (np.all(np.isfinite(g["A_te"])) and np.all(np.isfinite(g["B_te"]))):
            raise FloatingPointError(
                f"non-finite transient-expert gradient at warm-up step {traj.steps_taken}")
        dA, dB = -eta * g["A_te"], -eta * g["B_te"]
        traj.omega_A += -g["A_te"] * dA
        traj.omega_B += -g["B_te"] * dB
        te.A = te.A + dA
        te.B = te.B + dB
        traj.steps_taken += 1
        traj.losses.append(loss)
        if record:
            traj.snapshots.append(te.copy())
    return te, traj, capture_activations(model, te, X)


def capture_activations(model: MoeClassifier, te: LoraExpert, X) -> ActivationBuffer:
    fw = model.forward(X, te=te)
    return ActivationBuffer(fw.moe.e_te.copy(), [fw.moe.E[:, i, :].copy()
                                                 for i in range(model.layer.n_experts)])


def finalize_importance(traj: WarmupTrajectory, te_final: LoraExpert, xi: float) -> ImportanceMask:
    if xi <= 0:
        raise ValueError("damping xi must be > 0")
    if traj.steps_taken < 1:
        raise ValueError("no warm-up steps recorded")
    omega_A = np.maximum(traj.omega_A, 0.0) / ((te_final.A - traj.phi0.A) ** 2 + xi)
    omega_B = np.maximum(traj.omega_B, 0.0) / ((te_final.B - traj.phi0.B) ** 2 + xi)
    return ImportanceMask(omega_A, omega_B)


def compute_cka(Z_a, Z_b) -> float:
    """Linear CKA of two column-centred activation matrices."""
    Z_a = np.asarray(Z_a, dtype=np.float64)
    Z_b = np.asarray(Z_b, dtype=np.float64)
    if Z_a.shape != Z_b.shape or Z_a.ndim != 2:
        raise ShapeError(f"CKA operands must share a 2-D shape: {Z_a.shape} vs {Z_b.shape}")
    if not np.any(Z_a) or not np.any(Z_b):
        warnings.warn("all-zero representation in CKA; score set to 0", ZeroRepresentationWarning,
                      stacklevel=2)
        return 0.0
    cross = np.linalg.norm(Z_b.T @ Z_a) ** 2
    return float(cross / (np.linalg.norm(Z_a.T @ Z_a) * np.linalg.norm(Z_b.T @ Z_b)))


def consistency_scores(buf: ActivationBuffer) -> np.ndarray:
    if buf.n_tokens < 2:
        raise ValueError("activation buffer needs at least 2 tokens")
    z_te = center_columns(buf.Z_te)
    return np.array([compute_cka(z_te, center_columns(z)) for z in buf.Z_se])
