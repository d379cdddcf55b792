"""Linear one-vs-rest SVM on frozen embeddings, and score-sum ensembling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class SvmModel:
    weights: np.ndarray  # (K, D)
    biases: np.ndarray  # (K,)
    mean: np.ndarray  # (D,)
    scale: np.ndarray  # (D,), > 0
    C: float = 1.0
    seed: int = 0
    objective_history: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(), "biases": self.biases.tolist(),
            "mean": self.mean.tolist(), "scale": self.scale.tolist(),
            "C": self.C, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        return cls(np.asarray(d["weights"], dtype=np.float64).reshape(len(d["biases"]), -1),
                   np.asarray(d["biases"], dtype=np.float64),
                   np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64),
                   float(d["C"]), int(d["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SvmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def hinge_objective(weights: np.ndarray, biases: np.ndarray, x: np.ndarray,
                    targets: np.ndarray, C: float) -> np.ndarray:
    """Per-class 1/2 |w_k|^2 + C sum_i max(0, 1 - y_ik (w_k . x_i + b_k)).

    ``x`` is already standardized; ``targets`` is (n, K) in {-1, +1}.
    """
    margins = targets * (x @ weights.T + biases)
    return 0.5 * np.sum(weights ** 2, axis=1) + C * np.maximum(0.0, 1.0 - margins).sum(axis=0)


def train_svm(embeddings: np.ndarray, labels: Sequence[int], C: float = 1.0, epochs: int = 200,
              seed: int = 0, n_classes: int | None = None, batch_size: int = 16) -> SvmModel:
    """One-vs-rest linear SVMs by seeded mini-batch subgradient descent.

    Steps follow a 1/(t + C n) schedule: the regularizer is 1-strongly convex
    in w, and the offset keeps the first steps from overshooting when the
    hinge term (gradient ~ C n) dominates;
    the returned parameters are the running average of the second half of
    iterates, and the best such average seen at any epoch end is kept, so
    ``objective_history`` is nonincreasing.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("embeddings must be (n, D) with one label per row")
    if len(np.unique(y)) < 2:
        raise ValueError("SVM training needs at least two classes")
    if C < 0:
        raise ValueError("C must be nonnegative")
    k = int(n_classes if n_classes is not None else y.max() + 1)
    n, d = x.shape
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale <= 1e-12] = 1.0
    xs = (x - mean) / scale
    targets = np.where(y[:, None] == np.arange(k)[None, :], 1.0, -1.0)

    rng = np.random.default_rng(seed)
    w = np.zeros((k, d))
    b = np.zeros(k)
    w_avg, b_avg, n_avg = np.zeros((k, d)), np.zeros(k), 0
    best = (hinge_objective(w, b, xs, targets, C).sum(), w.copy(), b.copy())
    history = [best[0]]
    steps_per_epoch = max(1, -(-n // batch_size))
    total = epochs * steps_per_epoch
    t, t0 = 0, max(1.0, C * n)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            t += 1
            idx = order[start:start + batch_size]
            xb, yb = xs[idx], targets[idx]
            active = (yb * (xb @ w.T + b) < 1.0) * yb  # (m, K)
            factor = C * n / len(idx)
            gw = w - factor * active.T @ xb
            gb = -factor * active.sum(axis=0)
            eta = 1.0 / (t + t0)
            w = w - eta * gw
            b = b - eta * gb
            if t > total // 2:
                n_avg += 1
                w_avg += (w - w_avg) / n_avg
                b_avg += (b - b_avg) / n_avg
        cand_w, cand_b = (w_avg, b_avg) if n_avg else (w, b)
        obj = hinge_objective(cand_w, cand_b, xs, targets, C).sum()
        if obj <= best[0]:
            best = (obj, cand_w.copy(), cand_b.copy())
        history.append(best[0])
    return SvmModel(best[1], best[2], mean, scale, float(C), int(seed), history)


def svm_scores(model: SvmModel, embedding) -> np.ndarray:
    """Decision values w_k . standardize(x) + b_k; (K,) for one vector, (n, K) for rows."""
    x = np.asarray(embedding, dtype=np.float64)
    if x.shape[-1] != model.weights.shape[1]:
        raise ValueError(f"embedding dimension {x.shape[-1]} does not match SVM ({model.weights.shape[1]})")
    return model.standardize(x) @ model.weights.T + model.biases


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax with ties broken toward the lowest class index."""
    return np.argmax(np.asarray(scores), axis=-1)


def ensemble_scores(score_lists: Sequence) -> np.ndarray:
    """Elementwise mean of per-system decision values."""
    if len(score_lists) == 0:
        raise ValueError("ensemble needs at least one score list")
    arrs = [np.asarray(s, dtype=np.float64) for s in score_lists]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("score lists differ in class count")
    total = arrs[0].copy()
    for a in arrs[1:]:
        total = total + a
    return total / len(arrs)
