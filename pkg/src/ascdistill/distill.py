"""Teacher-student machinery: temperature softening, distillation losses and
soft-label extraction from concatenated same-class teacher inputs."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .features import FeatureStore
from .nnet import tensor as T
from .nnet.model import Model
from .nnet.tensor import Tensor

log = logging.getLogger(__name__)

EPS = 1e-12

DEFAULT_WEIGHTS = {
    "output": (1.0, 0.0, 0.0),
    "embedding": (0.0, 1.0, 0.0),
    "both": (0.5, 0.5, 0.0),
}


class SofteningMode(str, Enum):
    PROBABILITY = "probability"  # softmax(p / T) of teacher probabilities
    LOGIT = "logit"  # softmax(z / T) of teacher logits


@dataclass(frozen=True)
class DistillConfig:
    point: str = "output"
    temperature: float = 1.0
    softening: SofteningMode = SofteningMode.PROBABILITY
    teacher_concat_count: int = 1
    loss_weights: Optional[tuple] = None  # (w_output, w_embedding, w_hard)
    partner_resample: str = "per-epoch"

    def __post_init__(self):
        if self.point not in DEFAULT_WEIGHTS:
            raise ValueError(f"point must be one of {sorted(DEFAULT_WEIGHTS)}, got {self.point!r}")
        object.__setattr__(self, "softening", SofteningMode(self.softening))
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.teacher_concat_count < 1:
            raise ValueError("teacher_concat_count must be >= 1")
        if self.partner_resample not in ("per-epoch", "fixed"):
            raise ValueError("partner_resample must be 'per-epoch' or 'fixed'")
        w = DEFAULT_WEIGHTS[self.point] if self.loss_weights is None else tuple(
            float(v) for v in self.loss_weights)
        if len(w) != 3 or any(v < 0 for v in w):
            raise ValueError("loss_weights must be three nonnegative numbers")
        if self.point == "output" and w[1] != 0 or self.point == "embedding" and w[0] != 0:
            raise ValueError(f"inactive distillation point has nonzero weight: {w}")
        if not any(v > 0 for v in w):
            raise ValueError("at least one loss weight must be positive")
        object.__setattr__(self, "loss_weights", w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["softening"] = self.softening.value
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if d.get("loss_weights") is not None:
            d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)


def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soften(teacher_output, temperature: float, mode=SofteningMode.PROBABILITY) -> np.ndarray:
    """softmax(teacher_output / T) along the last axis.

    In probability mode the input must already be a distribution; the
    temperature is then applied to probabilities rather than logits.
    """
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    v = np.asarray(teacher_output, dtype=np.float64)
    if SofteningMode(mode) is SofteningMode.PROBABILITY:
        if np.any(v < -1e-12) or np.any(np.abs(v.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError("probability-mode softening expects inputs on the simplex")
    return _softmax(v / temperature)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _batch_size(shape: tuple) -> int:
    return int(np.prod(shape[:-1])) if len(shape) > 1 else 1


def ts_output_loss(teacher_dist, student_probs) -> Tensor:
    """Soft-label cross-entropy -sum_j t_j log(s_j + eps), averaged over the batch."""
    s = _as_tensor(student_probs)
    t = np.asarray(teacher_dist, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"dimension mismatch: teacher {t.shape} vs student {s.shape}")
    total = T.sum_all(T.mul(T.log(s, EPS), Tensor(t)))
    return T.scale(total, -1.0 / _batch_size(s.shape))


def hard_label_loss(labels: Sequence[int], student_probs) -> Tensor:
    s = _as_tensor(student_probs)
    onehot = np.zeros(s.shape)
    onehot.reshape(-1, s.shape[-1])[np.arange(len(labels)), np.asarray(labels)] = 1.0
    return ts_output_loss(onehot, s)


def embedding_loss(teacher_emb, student_emb) -> Tensor:
    """Mean squared difference over embedding dimensions (and batch)."""
    s = _as_tensor(student_emb)
    t = np.asarray(teacher_emb, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"dimension mismatch: teacher {t.shape} vs student {s.shape}")
    d = T.sub(s, Tensor(t))
    return T.mean_all(T.mul(d, d))


def student_loss(outputs: tuple, targets: tuple, config: DistillConfig) -> Tensor:
    """Weighted sum of the active distillation terms.

    ``outputs`` is (student probabilities, student embedding); ``targets`` is
    (teacher distribution, teacher embedding, one-hot labels). Targets of
    zero-weighted terms may be None.
    """
    probs, emb = outputs
    dist, t_emb, onehot = targets
    w_out, w_emb, w_hard = config.loss_weights
    if not (w_out or w_emb or w_hard):
        raise ValueError("all loss weights are zero")
    terms = []
    if w_out:
        terms.append(T.scale(ts_output_loss(dist, probs), w_out))
    if w_emb:
        terms.append(T.scale(embedding_loss(t_emb, emb), w_emb))
    if w_hard:
        terms.append(T.scale(ts_output_loss(onehot, probs), w_hard))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total


# -- soft-label extraction -----------------------------------------------------


@dataclass
class SoftLabelSet:
    distributions: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)
    teacher_inputs: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def targets(self, ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([self.distributions[i] for i in ids]),
                np.stack([self.embeddings[i] for i in ids]))

    def to_jsonl(self, path) -> None:
        lines = []
        for sid in self.distributions:
            lines.append(json.dumps({
                "segment_id": sid,
                "distribution": self.distributions[sid].tolist(),
                "embedding": self.embeddings[sid].tolist(),
                "teacher_input": list(self.teacher_inputs.get(sid, (sid,))),
                "provenance": self.provenance,
            }, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "SoftLabelSet":
        out = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            sid = rec["segment_id"]
            out.distributions[sid] = np.asarray(rec["distribution"], dtype=np.float64)
            out.embeddings[sid] = np.asarray(rec["embedding"], dtype=np.float64)
            out.teacher_inputs[sid] = tuple(rec.get("teacher_input", (sid,)))
            out.provenance = rec.get("provenance", {})
        return out


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def choose_partners(segment_id: str, pool: Sequence[str], n_partners: int, seed: int) -> list[str]:
    """Seeded draw of distinct same-class partners, excluding the base segment.

    Falls back to repeating the base segment when the class has too few
    other members.
    """
    if n_partners <= 0:
        return []
    rng = np.random.default_rng([seed & 0xFFFFFFFF, stable_hash(segment_id)])
    others = sorted(p for p in pool if p != segment_id)
    k = min(n_partners, len(others))
    picked = [others[i] for i in rng.choice(len(others), size=k, replace=False)] if k else []
    if k < n_partners:
        log.warning("class of %s has %d other segment(s); self-concatenating to reach %d partners",
                    segment_id, len(others), n_partners)
        picked += [segment_id] * (n_partners - k)
    return picked


def teacher_outputs(teacher: Model, x: np.ndarray, batch_size: int = 32):
    """(embeddings, logits, probabilities) for stacked inputs, no tape."""
    embs, logits, probs = [], [], []
    for i in range(0, len(x), batch_size):
        r = teacher.forward(x[i:i + batch_size])
        embs.append(r.embedding.data)
        logits.append(r.logits.data)
        probs.append(r.probabilities.data)
    return np.concatenate(embs), np.concatenate(logits), np.concatenate(probs)


def extract_soft_labels(teacher: Model, store: FeatureStore, ids: Sequence[str],
                        config: DistillConfig, seed: int,
                        pool_ids: Optional[Sequence[str]] = None,
                        batch_size: int = 32) -> SoftLabelSet:
    """Run the teacher on each base segment followed by its partners.

    Partners come from ``pool_ids`` (default: ``ids``) of the same class.
    """
    dataset = store.dataset
    by_class = dataset.ids_by_class(pool_ids if pool_ids is not None else ids)
    groups = []
    for sid in ids:
        partners = choose_partners(sid, by_class[dataset[sid].label],
                                   config.teacher_concat_count - 1, seed)
        groups.append((sid, *partners))
    x = store.batch(teacher.arch, groups)
    emb, logits, probs = teacher_outputs(teacher, x, batch_size)
    source = probs if config.softening is SofteningMode.PROBABILITY else logits
    dists = soften(source, config.temperature, config.softening)
    out = SoftLabelSet(provenance={
        "distill": config.to_dict(),
        "teacher_checksum": teacher.checksum(),
        "partner_seed": int(seed),
    })
    for i, g in enumerate(groups):
        out.distributions[g[0]] = dists[i]
        out.embeddings[g[0]] = emb[i]
        out.teacher_inputs[g[0]] = g
    return out
