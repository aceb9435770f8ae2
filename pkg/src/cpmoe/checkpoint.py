"""Self-describing JSON checkpoints with flat float arrays and explicit shapes.

Floats are written in shortest round-trip form, so ``save(load(f))``
reproduces ``f`` byte for byte and a resumed run continues bit-identically.
All random draws are derived from ``(seed, purpose, task)``; the task cursor
therefore fully describes the random state.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .consolidation import ConsolidationState
from .metrics import AccuracyMatrix
from .moe import FrozenBackbone, MoeClassifier, MoeLayer
from .trainer import ContinualState, StepRecord, TaskLog

FORMAT = "cpmoe-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, mismatched or unsupported checkpoint."""


def encode_array(arr: np.ndarray | None):
    if arr is None:
        return None
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}


def decode_array(obj) -> np.ndarray | None:
    if obj is None:
        return None
    shape = tuple(obj["shape"])
    data = np.array(obj["data"], dtype=np.float64)
    if data.size != math.prod(shape):
        raise CheckpointError(f"array with shape {shape} has {data.size} values")
    return data.reshape(shape)


def manifest_digest(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def manifest_ref(manifest: dict) -> dict:
    return {"file": "manifest.json", "sha256": manifest_digest(manifest)}


def state_to_dict(state: ContinualState, config: ExperimentConfig, ref: dict) -> dict:
    m, c = state.model, state.cons
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": config.to_dict(),
        "seed": state.seed,
        "cursor": state.cursor,
        "rng": {"scheme": "derived(seed, purpose, task)", "seed": state.seed, "next_task": state.cursor},
        "manifest": dict(ref),
        "backbone": {k: encode_array(getattr(m.backbone, k)) for k in ("W1", "b1", "W2", "b2")},
        "params": {k: encode_array(v) for k, v in m.layer.params().items()},
        "lora_scale": m.layer.lora_scale,
        "consolidation": {
            "omega_A": encode_array(c.omega_A),
            "omega_B": encode_array(c.omega_B),
            "A_old": encode_array(c.A_old),
            "B_old": encode_array(c.B_old),
            "task_index": c.task_index,
        },
        "h": None if state.h is None else [float(v) for v in state.h],
        "matrix": state.matrix.to_json(),
        "steps": [[s.task, s.epoch, s.step, s.total, s.task_loss, s.reg, s.aux, s.lr, list(s.usage)]
                  for s in state.steps],
        "task_logs": [asdict(t) for t in state.task_logs],
    }


def dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_checkpoint(path: str | Path, state: ContinualState, config: ExperimentConfig,
                    ref: dict) -> Path:
    """Write atomically (temporary file then rename). ``ref`` comes from :func:`manifest_ref`."""
    path = Path(path)
    text = dumps(state_to_dict(state, config, ref))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def state_from_dict(obj: dict) -> tuple[ContinualState, ExperimentConfig, dict]:
    if obj.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} file")
    if obj.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {obj.get('version')}")
    try:
        config = ExperimentConfig.from_dict(obj["config"])
        seed = int(obj["seed"])
        model_cfg = config.model_for_seed(seed)
        bb = FrozenBackbone(**{k: decode_array(v) for k, v in obj["backbone"].items()})
        p = {k: decode_array(v) for k, v in obj["params"].items()}
        layer = MoeLayer(p["A"], p["B"], p["W_gate"], float(obj["lora_scale"]))
        cons_obj = obj["consolidation"]
        cons = ConsolidationState(decode_array(cons_obj["omega_A"]), decode_array(cons_obj["omega_B"]),
                                  decode_array(cons_obj["A_old"]), decode_array(cons_obj["B_old"]),
                                  int(cons_obj["task_index"]))
        matrix = AccuracyMatrix.from_json(obj["matrix"])
        steps = [StepRecord(*row[:8], list(row[8])) for row in obj["steps"]]
        logs = [TaskLog(**t) for t in obj["task_logs"]]
        h = None if obj["h"] is None else np.array(obj["h"], dtype=np.float64)
        cursor = int(obj["cursor"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: missing or invalid field {exc}") from None
    expected = (model_cfg.n_experts, model_cfg.expert_rank, model_cfg.d_in)
    if layer.A.shape != expected:
        raise CheckpointError(f"expert factors {layer.A.shape} do not match config {expected}")
    if obj["rng"].get("next_task") != cursor:
        raise CheckpointError("random-state cursor disagrees with the task cursor")
    model = MoeClassifier(model_cfg, bb, layer)
    state = ContinualState(model, cons, config.train, config.ablation, seed, matrix, h, cursor,
                           steps, logs)
    return state, config, obj["manifest"]


def load_checkpoint(path: str | Path) -> tuple[ContinualState, ExperimentConfig, dict]:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    return state_from_dict(obj)
