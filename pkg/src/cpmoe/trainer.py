"""Continual-learning loop: probe, protected training, consolidation."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .consolidation import (ConsolidationState, accumulate_importance, aux_grad_logits, aux_loss,
                            reg_grad, reg_loss, snapshot_experts, total_loss)
from .metrics import AccuracyMatrix
from .moe import ModelConfig, MoeClassifier, cross_entropy
from .probe import (ZeroRepresentationWarning, consistency_scores, finalize_importance,
                    warmup_transient)
from .taskgen import TaskData, TaskStream, batches

log = logging.getLogger(__name__)


class NumericalAbort(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 16
    base_lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid AdamW constants")


@dataclass
class Ablation:
    cp_bias: bool = True
    te_reg: bool = True
    cka_weighting: bool = True

    def validate(self) -> None:
        pass

    @property
    def label(self) -> str:
        """Directory-safe variant name: ``full``, ``vanilla`` or the switches left on."""
        on = [k for k in ("cp_bias", "te_reg", "cka_weighting") if getattr(self, k)]
        if not self.cp_bias and not self.te_reg:
            return "vanilla"
        if len(on) == 3:
            return "full"
        return "+".join(on)

    @property
    def probes(self) -> bool:
        return self.cp_bias or self.te_reg


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Adam with decoupled weight decay and a per-task cosine schedule."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig, total_steps: int):
        self.cfg = cfg
        self.total_steps = max(int(total_steps), 1)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    @property
    def lr(self) -> float:
        return cosine_lr(self.cfg.base_lr, self.t, self.total_steps)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Update ``params`` in place; returns the learning rate used."""
        c = self.cfg
        lr = self.lr
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
            if not np.all(np.isfinite(g)):
                raise NumericalAbort(f"non-finite gradient for {k}")
        self.t += 1
        b1c = 1.0 - c.beta1 ** self.t
        b2c = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            p = params[k]
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            if c.weight_decay:
                p *= 1.0 - lr * c.weight_decay
            p -= lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + c.eps)
        return lr


@dataclass
class Objective:
    total: float
    task: float
    reg: float
    aux: float
    grads: dict[str, np.ndarray]
    usage: np.ndarray


def compute_objective(model: MoeClassifier, X, y, cons: ConsolidationState | None, h=None,
                      lam: float | None = None, gamma: float | None = None,
                      mask=None) -> Objective:
    """Total loss task + lam*reg + gamma*aux and its gradient for A, B and W_gate."""
    cfg = model.config
    lam = cfg.lam if lam is None else lam
    gamma = cfg.gamma if gamma is None else gamma
    fw = model.forward(X, h, mask=mask)
    task, dlogits = cross_entropy(fw.logits, y)
    dec = fw.decision
    # load balancing sees only the router's own preferences, never the CP prior
    aux = aux_loss(dec.probs, dec.native_selected)
    reg = 0.0 if cons is None else reg_loss(cons, model.layer)
    total = total_loss(task, reg, aux, lam, gamma)
    grads = model.backward(fw, dlogits, dlogits_router=gamma * aux_grad_logits(dec.probs, dec.native_selected))
    if cons is not None and cons.has_importance:
        rg = reg_grad(cons, model.layer)
        grads["A"] = grads["A"] + lam * rg["A"]
        grads["B"] = grads["B"] + lam * rg["B"]
    return Objective(total, task, reg, aux, grads, dec.usage(model.layer.n_experts))


def evaluate(model: MoeClassifier, X, y, h=None) -> float:
    return float(np.mean(model.predict(X, h) == np.asarray(y)))


@dataclass
class StepRecord:
    task: int
    epoch: int
    step: int
    total: float
    task_loss: float
    reg: float
    aux: float
    lr: float
    usage: list[int]


@dataclass
class TaskLog:
    task: int
    epoch_losses: list[float]
    h: list[float] | None
    warmup_losses: list[float]
    usage: list[int]


@dataclass
class ContinualState:
    model: MoeClassifier
    cons: ConsolidationState
    train: TrainConfig
    ablation: Ablation
    seed: int
    matrix: AccuracyMatrix
    h: np.ndarray | None = None  # routing bias from the latest warm-up
    cursor: int = 0  # index of the next seen task to train
    steps: list[StepRecord] = field(default_factory=list)
    task_logs: list[TaskLog] = field(default_factory=list)

    @classmethod
    def fresh(cls, model_cfg: ModelConfig, train: TrainConfig, ablation: Ablation,
              n_seen: int, n_unseen: int) -> ContinualState:
        train.validate()
        model = MoeClassifier.init(model_cfg, np.random.default_rng([model_cfg.seed, 7]))
        return cls(model, ConsolidationState.empty(model.layer), train, ablation, model_cfg.seed,
                   AccuracyMatrix(n_seen, n_unseen))

    @property
    def routing_h(self) -> np.ndarray | None:
        return self.h if self.ablation.cp_bias else None


def probe_task(state: ContinualState, data: TaskData, task_index: int):
    """Transient-expert warm-up on the task's first samples.

    Returns ``(trajectory, importance, h)``; the transient expert itself is dropped.
    """
    cfg = state.model.config
    X, y = data.X_train, data.y_train
    n_warm = min(cfg.warmup_samples, len(X))
    if n_warm < cfg.warmup_batch:
        raise ValueError(f"warm-up subset ({n_warm}) shorter than one batch ({cfg.warmup_batch})")
    with warnings.catch_warnings():
        # task 0 has B = 0 everywhere, so every score is 0 by definition
        warnings.simplefilter("ignore", ZeroRepresentationWarning)
        te, traj, buf = warmup_transient(state.model, X[:n_warm], y[:n_warm], cfg.warmup_lr,
                                         cfg.warmup_batch,
                                         np.random.default_rng([state.seed, 2, task_index]))
        omega = finalize_importance(traj, te, cfg.damping)
        h = consistency_scores(buf)
    return traj, omega, h


def run_task(state: ContinualState, data: TaskData, task_index: int) -> TaskLog:
    """Warm-up probe, protected training and consolidation for one task.

    Only ``data`` (the current task) is touched.
    """
    model, cfg, tc, ab = state.model, state.model.config, state.train, state.ablation
    X, y = data.X_train, data.y_train
    if len(X) == 0:
        raise ValueError("empty task dataset")

    omega = h = None
    warm_losses: list[float] = []
    if ab.probes:
        traj, omega, h = probe_task(state, data, task_index)
        warm_losses = traj.losses
        state.h = h

    routing_h = state.routing_h
    cons = state.cons if ab.te_reg else None
    lam = cfg.lam if ab.te_reg else 0.0
    params = model.layer.params()
    steps_per_epoch = math.ceil(len(X) / tc.batch_size)
    opt = AdamW(params, tc, tc.epochs * steps_per_epoch)
    drop_rng = np.random.default_rng([state.seed, 4, task_index])
    usage = np.zeros(model.layer.n_experts, dtype=np.int64)
    epoch_losses = []
    for epoch in range(tc.epochs):
        running = 0.0
        for b, (xb, yb) in enumerate(batches(X, y, tc.batch_size, [state.seed, 3, task_index, epoch])):
            mask = None
            if cfg.lora_dropout > 0:
                keep = drop_rng.random(xb.shape) >= cfg.lora_dropout
                mask = keep / (1.0 - cfg.lora_dropout)
            obj = compute_objective(model, xb, yb, cons, routing_h, lam=lam, mask=mask)
            if not math.isfinite(obj.total):
                raise NumericalAbort(f"non-finite loss at task {task_index}, epoch {epoch}, batch {b}")
            lr = opt.step(params, obj.grads)
            usage += obj.usage
            running += obj.total
            state.steps.append(StepRecord(task_index, epoch, opt.t, obj.total, obj.task, obj.reg,
                                          obj.aux, lr, obj.usage.tolist()))
        epoch_losses.append(running / steps_per_epoch)

    if ab.te_reg:
        weights = h if ab.cka_weighting else np.full_like(h, h.mean())
        accumulate_importance(state.cons, omega, weights)
    snapshot_experts(state.cons, model.layer)
    state.cons.task_index = task_index + 1
    tl = TaskLog(task_index, epoch_losses, None if h is None else h.tolist(), warm_losses,
                 usage.tolist())
    state.task_logs.append(tl)
    return tl


def evaluate_column(state: ContinualState, stream: TaskStream) -> np.ndarray:
    return np.array([evaluate(state.model, stream.dataset(t.task_id).X_test,
                              stream.dataset(t.task_id).y_test, state.routing_h)
                     for t in stream.tasks])


def run_stream(state: ContinualState, stream: TaskStream,
               on_task_done: Callable[[ContinualState], None] | None = None,
               stop_after: int | None = None) -> ContinualState:
    """Train the remaining seen tasks in order, filling one matrix column per task.

    ``stop_after`` halts once that many tasks are complete (used for resumable runs).
    """
    if not stream.seen:
        raise ValueError("stream has no seen tasks")
    end = len(stream.seen) if stop_after is None else min(stop_after, len(stream.seen))
    while state.cursor < end:
        t = state.cursor
        tl = run_task(state, stream.dataset(stream.seen[t].task_id), t)
        state.matrix.set_column(t, evaluate_column(state, stream))
        state.cursor += 1
        log.info("task %d done: loss %.4f -> %.4f, acc %.3f", t, tl.epoch_losses[0],
                 tl.epoch_losses[-1], state.matrix.R[t, t])
        if on_task_done is not None:
            on_task_done(state)
    return state
