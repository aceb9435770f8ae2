"""LoRA mixture-of-experts adapter on a frozen two-layer MLP classifier.

The first linear block of the backbone is the adapted block::

    z = W1 x + b1 + (lora_scale / r) * sum_{i in K(x)} g_i(x) B_i A_i x
    logits = W2 tanh(z) + b2

Routing is per sample. Gradients are written out by hand; the top-k set is
treated as a constant in the backward pass.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from .numerics import ShapeError, check_finite, log_softmax, softmax


@dataclass
class ModelConfig:
    d_in: int = 32
    d_hidden: int = 64
    n_classes: int = 4
    n_experts: int = 8
    expert_rank: int = 4
    top_k: int = 2
    lora_scale: float | None = None  # None -> expert_rank, so lora_scale / r == 1
    lora_dropout: float = 0.1
    cp_bias_strength: float = 0.2
    lam: float = 5e3
    gamma: float = 0.1
    warmup_lr: float = 10.0
    warmup_samples: int = 512
    warmup_batch: int = 32
    damping: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.lora_scale is None:
            self.lora_scale = float(self.expert_rank)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        if self.expert_rank < 1:
            raise ValueError("expert_rank must be >= 1")
        if self.expert_rank > min(self.d_in, self.d_hidden) // 2:
            raise ValueError(
                f"expert_rank={self.expert_rank} too large for d_in={self.d_in}, "
                f"d_hidden={self.d_hidden} (limit min/2)"
            )
        if self.damping <= 0:
            raise ValueError("damping must be > 0")
        if self.lora_scale <= 0:
            raise ValueError("lora_scale must be > 0")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ValueError("lora_dropout must lie in [0, 1)")
        for name in ("cp_bias_strength", "lam", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.warmup_lr <= 0:
            raise ValueError("warmup_lr must be > 0")
        if self.warmup_samples < 1 or self.warmup_batch < 1:
            raise ValueError("warm-up sizes must be >= 1")
        if min(self.d_in, self.d_hidden) < 2 or self.n_classes < 2:
            raise ValueError("dimensions too small")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass
class FrozenBackbone:
    W1: np.ndarray  # (d_hidden, d_in)
    b1: np.ndarray
    W2: np.ndarray  # (n_classes, d_hidden)
    b2: np.ndarray

    def __post_init__(self):
        self.W1, self.b1 = _frozen(self.W1), _frozen(self.b1)
        self.W2, self.b2 = _frozen(self.W2), _frozen(self.b2)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> FrozenBackbone:
        W1 = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_in), size=(cfg.d_hidden, cfg.d_in))
        b1 = rng.normal(0.0, 0.1, size=cfg.d_hidden)
        W2 = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_hidden), size=(cfg.n_classes, cfg.d_hidden))
        return cls(W1, b1, W2, np.zeros(cfg.n_classes))

    def block(self, X: np.ndarray) -> np.ndarray:
        """Output of the frozen first linear block, F(x)."""
        return X @ self.W1.T + self.b1

    def head(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) @ self.W2.T + self.b2

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.head(self.block(X))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.W1, self.b1, self.W2, self.b2):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class LoraExpert:
    A: np.ndarray  # (r, d_in)
    B: np.ndarray  # (d_out, r)


@dataclass
class Router:
    W_gate: np.ndarray  # (d_in, n)


@dataclass
class MoeLayer:
    """Stable experts stored stacked: ``A[i]`` and ``B[i]`` belong to expert i."""

    A: np.ndarray  # (n, r, d_in)
    B: np.ndarray  # (n, d_out, r)
    W_gate: np.ndarray  # (d_in, n)
    lora_scale: float

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> MoeLayer:
        bound = 1.0 / np.sqrt(cfg.d_in)
        A = rng.uniform(-bound, bound, size=(cfg.n_experts, cfg.expert_rank, cfg.d_in))
        B = np.zeros((cfg.n_experts, cfg.d_hidden, cfg.expert_rank))
        W_gate = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_in), size=(cfg.d_in, cfg.n_experts))
        return cls(A, B, W_gate, float(cfg.lora_scale))

    @property
    def n_experts(self) -> int:
        return self.A.shape[0]

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.lora_scale / self.rank

    @property
    def router(self) -> Router:
        return Router(self.W_gate)

    def expert(self, i: int) -> LoraExpert:
        return LoraExpert(self.A[i], self.B[i])

    @property
    def experts(self) -> list[LoraExpert]:
        return [self.expert(i) for i in range(self.n_experts)]

    def params(self) -> dict[str, np.ndarray]:
        return {"A": self.A, "B": self.B, "W_gate": self.W_gate}


@dataclass
class RoutingDecision:
    """Routing outcome for a batch of tokens (or a single token when 1-D).

    ``weights`` is dense over experts with exact zeros off the selected set.
    """

    selected: np.ndarray  # (N, K) expert indices, best first
    weights: np.ndarray  # (N, n)
    biased: np.ndarray  # (N, n)
    logits: np.ndarray | None = None  # native logits s
    probs: np.ndarray | None = None  # softmax of native logits
    native_selected: np.ndarray | None = None  # top-k of the native logits (load balancing)

    def usage(self, n_experts: int) -> np.ndarray:
        return np.bincount(self.selected.ravel(), minlength=n_experts)


def expert_forward(expert: LoraExpert, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != expert.A.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != expert d_in {expert.A.shape[1]}")
    if expert.B.shape[1] != expert.A.shape[0]:
        raise ShapeError(f"expert factors incompatible: A {expert.A.shape}, B {expert.B.shape}")
    return (x @ expert.A.T) @ expert.B.T


def native_logits_and_probs(router: Router, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != router.W_gate.shape[0]:
        raise ShapeError(f"input dim {x.shape[-1]} != router d_in {router.W_gate.shape[0]}")
    s = x @ router.W_gate
    return s, softmax(s)


def apply_cp_bias(s, h, alpha_cp: float) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1 or s.shape[-1] != h.shape[0]:
        raise ShapeError(f"logits {s.shape} and consistency scores {h.shape} disagree")
    if alpha_cp < 0:
        raise ValueError("alpha_cp must be >= 0")
    return s + alpha_cp * h


def route_topk(biased, k: int, *, logits=None, probs=None) -> RoutingDecision:
    """Top-k selection over biased logits, ties going to the lower expert index.

    The weights are the softmax of the biased logits restricted to the
    selected set.
    """
    biased = np.asarray(biased, dtype=np.float64)
    single = biased.ndim == 1
    b2 = np.atleast_2d(biased)
    n = b2.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"top_k={k} must lie in [1, {n}]")
    order = np.argsort(-b2, axis=1, kind="stable")[:, :k]
    sel_logits = np.take_along_axis(b2, order, axis=1)
    weights = np.zeros_like(b2)
    np.put_along_axis(weights, order, softmax(sel_logits, axis=1), axis=1)
    if single:
        return RoutingDecision(order[0], weights[0], biased, logits, probs)
    return RoutingDecision(order, weights, b2, logits, probs)


@dataclass
class MoeCache:
    X: np.ndarray
    xe: np.ndarray  # expert-path input (dropout applied)
    U: np.ndarray  # (N, n, r) A_i x
    E: np.ndarray  # (N, n, d_out) B_i A_i x
    decision: RoutingDecision
    z: np.ndarray
    u_te: np.ndarray | None = None
    e_te: np.ndarray | None = None


def _moe_forward(layer: MoeLayer, backbone: FrozenBackbone, X, h=None, alpha_cp=0.0,
                 te=None, mask=None, top_k: int = 2) -> MoeCache:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != layer.A.shape[2]:
        raise ShapeError(f"input dim {X.shape[1]} != layer d_in {layer.A.shape[2]}")
    xe = X if mask is None else X * mask
    s, probs = native_logits_and_probs(layer.router, X)
    biased = s if h is None else apply_cp_bias(s, h, alpha_cp)
    decision = route_topk(biased, top_k, logits=s, probs=probs)
    decision.native_selected = decision.selected if h is None else route_topk(s, top_k).selected
    n, r, d = layer.A.shape
    U = (xe @ layer.A.reshape(n * r, d).T).reshape(-1, n, r)
    E = np.matmul(U.transpose(1, 0, 2), layer.B.transpose(0, 2, 1)).transpose(1, 0, 2)
    mix = np.einsum("ni,nih->nh", decision.weights, E)
    z = backbone.block(X) + layer.scale * mix
    cache = MoeCache(X, xe, U, E, decision, z)
    if te is not None:
        cache.u_te = xe @ te.A.T
        cache.e_te = cache.u_te @ te.B.T
        cache.z = z + layer.scale * cache.e_te
    return cache


def moe_forward(layer: MoeLayer, backbone: FrozenBackbone, x, h=None, te=None, *,
                alpha_cp: float = 0.0, top_k: int = 2, mask=None):
    """Adapted block output and the routing decision.

    Accepts a single input vector or a batch with one sample per row.
    """
    x = np.asarray(x, dtype=np.float64)
    cache = _moe_forward(layer, backbone, x, h, alpha_cp, te, mask, top_k)
    if x.ndim == 1:
        d = cache.decision
        return cache.z[0], RoutingDecision(d.selected[0], d.weights[0], d.biased[0],
                                           d.logits[0], d.probs[0], d.native_selected[0])
    return cache.z, cache.decision


@dataclass
class Forward:
    logits: np.ndarray
    a: np.ndarray  # tanh activations
    moe: MoeCache

    @property
    def decision(self) -> RoutingDecision:
        return self.moe.decision


@dataclass
class MoeClassifier:
    config: ModelConfig
    backbone: FrozenBackbone
    layer: MoeLayer

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator | None = None) -> MoeClassifier:
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        backbone = FrozenBackbone.init(cfg, rng)
        return cls(cfg, backbone, MoeLayer.init(cfg, rng))

    def forward(self, X, h=None, te=None, mask=None) -> Forward:
        cache = _moe_forward(self.layer, self.backbone, X, h, self.config.cp_bias_strength,
                             te, mask, self.config.top_k)
        a = np.tanh(cache.z)
        return Forward(a @ self.backbone.W2.T + self.backbone.b2, a, cache)

    def predict(self, X, h=None) -> np.ndarray:
        return np.argmax(self.forward(X, h).logits, axis=1)

    def backward(self, fw: Forward, dlogits: np.ndarray, dlogits_router=None, te=None,
                 stable: bool = True) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradient w.r.t. the class logits.

        ``dlogits_router`` is an extra gradient w.r.t. the native router
        logits (the load-balancing term). With ``te`` given, gradients for the
        transient expert are returned under ``A_te``/``B_te``.
        """
        c = fw.moe
        lay = self.layer
        scale = lay.scale
        dz = (dlogits @ self.backbone.W2) * (1.0 - fw.a ** 2)
        grads: dict[str, np.ndarray] = {}
        if stable:
            w = c.decision.weights
            dE = scale * w[:, :, None] * dz[:, None, :]
            grads["B"] = np.einsum("nih,nir->ihr", dE, c.U)
            dU = np.einsum("nih,ihr->nir", dE, lay.B)
            grads["A"] = np.einsum("nir,nd->ird", dU, c.xe)
            dw = scale * np.einsum("nh,nih->ni", dz, c.E)
            ds = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
            if dlogits_router is not None:
                ds = ds + dlogits_router
            grads["W_gate"] = c.X.T @ ds
        if te is not None:
            de = scale * dz
            grads["B_te"] = de.T @ c.u_te
            grads["A_te"] = (de @ te.B).T @ c.xe
        return grads


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    y = np.asarray(y)
    n, C = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} != ({n},)")
    if np.any(y < 0) or np.any(y >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    lp = log_softmax(logits, axis=1)
    loss = -float(np.mean(lp[np.arange(n), y]))
    d = np.exp(lp)
    d[np.arange(n), y] -= 1.0
    return loss, d / n


def task_loss(model: MoeClassifier, X, y, h=None, te=None) -> float:
    fw = model.forward(X, h, te)
    check_finite(fw.logits, "model logits")
    return cross_entropy(fw.logits, y)[0]


@dataclass(frozen=True)
class AdapterArch:
    """Adapter placement used by :func:`count_trainable_params`.

    ``modules`` lists (in, out) for every targeted linear module of one layer.
    ``rank`` is the total LoRA rank shared by ``experts`` experts.
    """

    layers: int
    modules: tuple[tuple[int, int], ...]
    rank: int
    experts: int


def _llama_modules(d: int, m: int, full: bool) -> tuple[tuple[int, int], ...]:
    attn = ((d, d),) * 4  # q, k, v, o
    ffn = ((d, m), (d, m), (m, d))  # gate, up, down
    return attn + ffn if full else ffn


PRESETS: dict[str, AdapterArch] = {
    "superni": AdapterArch(32, _llama_modules(4096, 11008, True), 32, 8),
    "vqa": AdapterArch(32, _llama_modules(4096, 11008, False), 16, 4),
    "trivial": AdapterArch(1, ((2, 2),), 1, 1),
}

BACKBONE_SIZES = {"superni": 6.7e9, "vqa": 6.7e9}


def count_trainable_params(arch: AdapterArch) -> int:
    """Stable experts + transient expert + router, summed over targeted modules."""
    if arch.rank % arch.experts:
        raise ValueError(f"experts={arch.experts} must divide rank={arch.rank}")
    r_e = arch.rank // arch.experts
    per_layer = 0
    for d_in, d_out in arch.modules:
        p_se = arch.rank * (d_in + d_out)
        p_te = r_e * (d_in + d_out)
        p_router = d_in * arch.experts
        per_layer += p_se + p_te + p_router
    return arch.layers * per_layer


def desk_arch(cfg: ModelConfig) -> AdapterArch:
    return AdapterArch(1, ((cfg.d_in, cfg.d_hidden),), cfg.expert_rank * cfg.n_experts, cfg.n_experts)
