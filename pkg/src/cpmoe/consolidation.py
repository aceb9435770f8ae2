"""Importance accumulation, protected-update regulariser and load balancing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .moe import MoeLayer
from .numerics import ShapeError
from .probe import ImportanceMask


@dataclass
class ConsolidationState:
    omega_A: np.ndarray  # (n, r, d_in) accumulated importance per expert
    omega_B: np.ndarray  # (n, d_out, r)
    A_old: np.ndarray | None = None
    B_old: np.ndarray | None = None
    task_index: int = 0

    @classmethod
    def empty(cls, layer: MoeLayer) -> ConsolidationState:
        return cls(np.zeros_like(layer.A), np.zeros_like(layer.B))

    @property
    def has_importance(self) -> bool:
        return bool(np.any(self.omega_A) or np.any(self.omega_B))


def accumulate_importance(state: ConsolidationState, omega: ImportanceMask, h) -> ConsolidationState:
    """Add ``h[i] * Omega_t`` into every expert's accumulated importance, in place."""
    h = np.asarray(h, dtype=np.float64)
    n = state.omega_A.shape[0]
    if h.shape != (n,):
        raise ShapeError(f"consistency scores {h.shape} do not match {n} experts")
    if np.any(h < 0) or np.any(h > 1 + 1e-9):
        raise ValueError("consistency scores must lie in [0, 1]")
    if omega.omega_A.shape != state.omega_A.shape[1:] or omega.omega_B.shape != state.omega_B.shape[1:]:
        raise ShapeError(
            f"importance mask shapes {omega.omega_A.shape}/{omega.omega_B.shape} do not match "
            f"expert factors {state.omega_A.shape[1:]}/{state.omega_B.shape[1:]}")
    state.omega_A += h[:, None, None] * omega.omega_A[None]
    state.omega_B += h[:, None, None] * omega.omega_B[None]
    return state


def _deviations(state: ConsolidationState, layer: MoeLayer):
    if state.A_old is None or state.B_old is None:
        raise ValueError("accumulated importance is nonzero but no parameter snapshot exists")
    return layer.A - state.A_old, layer.B - state.B_old


def reg_loss(state: ConsolidationState, layer: MoeLayer) -> float:
    if not state.has_importance:
        return 0.0
    dA, dB = _deviations(state, layer)
    return float(np.sum(state.omega_A * dA ** 2) + np.sum(state.omega_B * dB ** 2))


def reg_grad(state: ConsolidationState, layer: MoeLayer) -> dict[str, np.ndarray]:
    if not state.has_importance:
        return {"A": np.zeros_like(layer.A), "B": np.zeros_like(layer.B)}
    dA, dB = _deviations(state, layer)
    return {"A": 2.0 * state.omega_A * dA, "B": 2.0 * state.omega_B * dB}


def _load_fractions(probs: np.ndarray, selected: np.ndarray) -> np.ndarray:
    T, n = probs.shape
    if T == 0:
        raise ValueError("load-balancing loss needs at least one token")
    if selected.shape[0] != T:
        raise ShapeError(f"{selected.shape[0]} selections for {T} tokens")
    return np.bincount(selected.ravel(), minlength=n) / T


def aux_loss(probs, selected) -> float:
    """sum_i f_i P_i from native (unbiased) probabilities and the selected sets."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    selected = np.asarray(selected).reshape(probs.shape[0], -1)
    f = _load_fractions(probs, selected)
    return float(f @ probs.mean(axis=0))


def aux_grad_logits(probs, selected) -> np.ndarray:
    """Gradient of :func:`aux_loss` w.r.t. the native router logits (f_i held fixed)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    selected = np.asarray(selected).reshape(probs.shape[0], -1)
    T = probs.shape[0]
    dp = np.broadcast_to(_load_fractions(probs, selected) / T, probs.shape)
    return probs * (dp - np.sum(probs * dp, axis=1, keepdims=True))


def total_loss(task: float, reg: float, aux: float, lam: float, gamma: float) -> float:
    for name, v in (("task", task), ("reg", reg), ("aux", aux), ("lambda", lam), ("gamma", gamma)):
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {name} term: {v}")
    return task + lam * reg + gamma * aux


def snapshot_experts(state: ConsolidationState, layer: MoeLayer) -> ConsolidationState:
    state.A_old = layer.A.copy()
    state.B_old = layer.B.copy()
    return state
