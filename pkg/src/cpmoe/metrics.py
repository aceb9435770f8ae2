"""Accuracy matrix bookkeeping and the AP / AF / ZST summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AccuracyMatrix:
    """``R[j, t]``: accuracy on task j after training stage t (NaN until filled)."""

    n_seen: int
    n_unseen: int
    R: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.R is None:
            self.R = np.full((self.n_seen + self.n_unseen, self.n_seen), np.nan)
        if self.R.shape != (self.n_seen + self.n_unseen, self.n_seen):
            raise ValueError(f"matrix shape {self.R.shape} inconsistent with task counts")

    @property
    def kinds(self) -> list[str]:
        return ["seen"] * self.n_seen + ["unseen"] * self.n_unseen

    @property
    def stages_done(self) -> int:
        done = ~np.isnan(self.R).any(axis=0)
        return int(np.argmin(done)) if not done.all() else self.n_seen

    def set_column(self, t: int, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError("accuracies must lie in [0, 1]")
        self.R[:, t] = values

    def to_csv(self) -> str:
        """CSV with shortest round-trip floats; unevaluated cells are empty."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "kind"] + [f"stage_{t}" for t in range(self.n_seen)])
        for j, kind in enumerate(self.kinds):
            w.writerow([j, kind] + ["" if math.isnan(v) else repr(float(v)) for v in self.R[j]])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "n_seen": self.n_seen,
            "n_unseen": self.n_unseen,
            "R": [[None if math.isnan(v) else float(v) for v in row] for row in self.R],
        }

    @classmethod
    def from_json(cls, obj: dict) -> AccuracyMatrix:
        R = np.array([[np.nan if v is None else v for v in row] for row in obj["R"]], dtype=np.float64)
        return cls(obj["n_seen"], obj["n_unseen"], R.reshape(obj["n_seen"] + obj["n_unseen"], obj["n_seen"]))


def _final(m: AccuracyMatrix, rows: slice) -> np.ndarray:
    col = m.R[rows, m.n_seen - 1]
    if np.isnan(col).any():
        raise ValueError("final training stage has not been evaluated")
    return col


def average_performance(m: AccuracyMatrix) -> float:
    return float(np.mean(_final(m, slice(0, m.n_seen))))


def average_forgetting(m: AccuracyMatrix) -> float:
    """Mean of R[j, j] - R[j, M] over tasks j < M; negative values mean backward transfer."""
    M = m.n_seen
    if M < 2:
        return 0.0
    final = _final(m, slice(0, M))
    return float(np.mean([m.R[j, j] - final[j] for j in range(M - 1)]))


def average_forgetting_max(m: AccuracyMatrix) -> float:
    """Variant using the best accuracy over stages j..M-1 as the reference (never negative)."""
    M = m.n_seen
    if M < 2:
        return 0.0
    final = _final(m, slice(0, M))
    return float(np.mean([np.max(m.R[j, j:M]) - final[j] for j in range(M - 1)]))


def zero_shot_transfer(m: AccuracyMatrix) -> float:
    if m.n_unseen == 0:
        raise ValueError("no unseen tasks in the accuracy matrix")
    return float(np.mean(_final(m, slice(m.n_seen, m.n_seen + m.n_unseen))))


def summarize(m: AccuracyMatrix) -> dict[str, float]:
    out = {
        "AP": average_performance(m),
        "AF": average_forgetting(m),
        "AF_max": average_forgetting_max(m),
    }
    if m.n_unseen:
        out["ZST"] = zero_shot_transfer(m)
    return out
