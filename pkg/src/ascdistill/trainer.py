"""Teacher, multi-step and student training loops.

Every run is a pure function of (config, dataset, seed): shuffling, model
initialization and partner selection are all seeded, and gradients are
reduced in a fixed order, so logged losses reproduce bit for bit.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import distill
from .distill import DistillConfig
from .features import FeatureStore
from .nnet import checkpoint
from .nnet.model import ForwardResult, Model, backward, build_model, trunk_size
from .nnet.optim import AdamState, adam_step
from .nnet.tensor import Tensor
from .synthgen import FoldManifest

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model_kind: str = "spectrogram"
    scale: str = "desk"
    epochs: int = 30
    batch_size: int = 40
    lr: float = 0.001
    seed: int = 0
    fold_id: int = 1
    distill: Optional[DistillConfig] = None
    stage1_epochs: Optional[int] = None
    init_from_teacher: bool = False
    arch_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model_kind not in ("waveform", "spectrogram"):
            raise ValueError(f"model_kind must be 'waveform' or 'spectrogram', got {self.model_kind!r}")
        if self.batch_size < 1 or self.epochs < 1 or not self.lr >= 0:
            raise ValueError("need batch_size >= 1, epochs >= 1 and lr >= 0")
        if isinstance(self.distill, dict):
            self.distill = DistillConfig.from_dict(self.distill)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"] = self.distill.to_dict() if self.distill else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checkpoint_path: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    def to_jsonl(self, path, include_wall_time: bool = True) -> None:
        lines = [json.dumps({"config": self.config, "checkpoint": self.checkpoint_path,
                             "extra": self.extra}, sort_keys=True)]
        for r in self.records:
            r = dict(r) if include_wall_time else {k: v for k, v in r.items() if k != "wall_time"}
            lines.append(json.dumps(r, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n")


def _labels(store: FeatureStore, ids: Sequence[str]) -> np.ndarray:
    return np.asarray(store.dataset.labels(ids), dtype=int)


def accuracy(model: Model, store: FeatureStore, ids: Sequence[str], batch_size: int = 64) -> float:
    if not ids:
        return float("nan")
    x = store.singles(model.arch if model.arch != "spectrogram_cnn" else "spectrogram", ids)
    _, probs = model.predict(x, batch_size)
    return float(np.mean(np.argmax(probs, axis=1) == _labels(store, ids)))


def _locate_nonfinite(model: Model, x: np.ndarray) -> str:
    outs = model.run_layers(Tensor(x))
    for i, (layer, out) in enumerate(zip(model.layers, outs)):
        if not np.all(np.isfinite(out.data)):
            return f"layer {i} ({layer.spec.name or layer.spec.kind})"
    for name, p in model.parameters().items():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {name}"
    return "loss"


def fit(model: Model, store: FeatureStore, fold: FoldManifest, cfg: TrainConfig,
        loss_fn: Callable[[Sequence[str], ForwardResult], Tensor], epochs: int,
        stage: int = 1, epoch_hook: Optional[Callable[[int], None]] = None,
        trainlog: Optional[TrainLog] = None,
        val_loss: Optional[Callable[[Model], float]] = None) -> TrainLog:
    """Mini-batch Adam over ``fold.train_ids``.

    Keeps the weights with the best validation accuracy, or with the lowest
    ``val_loss`` when one is given.
    """
    train_ids = list(fold.train_ids)
    if not train_ids:
        raise TrainingError("empty train split")
    trainlog = trainlog or TrainLog(config=cfg.to_dict())
    arch = "spectrogram" if model.arch == "spectrogram_cnn" else model.arch
    rng = np.random.default_rng([cfg.seed, stage, 0x7EA])
    state = AdamState()
    best_score, best_state = -np.inf, None
    for epoch in range(epochs):
        t0 = time.perf_counter()
        if epoch_hook is not None:
            epoch_hook(epoch)
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            x = store.singles(arch, batch)
            res = model.forward(x, record=True)
            loss = loss_fn(batch, res)
            value = loss.item()
            grads = backward(res.tape, loss)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite loss or gradient in epoch {epoch} (stage {stage}); "
                                    f"first offender: {_locate_nonfinite(model, x)}")
            adam_step(model, grads, state, lr=cfg.lr)
            total += value * len(batch)
        record = {"stage": stage, "epoch": epoch, "train_loss": total / len(order),
                  "val_accuracy": accuracy(model, store, fold.val_ids)}
        score = record["val_accuracy"]
        if val_loss is not None and fold.val_ids:
            record["val_loss"] = val_loss(model)
            score = -record["val_loss"]
        record["wall_time"] = time.perf_counter() - t0
        trainlog.records.append(record)
        if fold.val_ids and score > best_score:
            best_score, best_state = score, model.state()
            trainlog.extra.setdefault("best_epoch", {})[str(stage)] = epoch
    if best_state is not None:
        model.load_state(best_state)
    return trainlog


def _onehot_loss(store: FeatureStore):
    def loss_fn(batch, res):
        return distill.hard_label_loss(_labels(store, batch), res.probabilities)
    return loss_fn


def _finish(model: Model, trainlog: TrainLog, checkpoint_dir) -> None:
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"{model.arch}-{model.checksum()[:12]}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save(model, path)
        trainlog.checkpoint_path = str(path)


def train_teacher(config: TrainConfig, store: FeatureStore, fold: FoldManifest,
                  checkpoint_dir=None) -> tuple[Model, TrainLog]:
    """Plain one-hot cross-entropy training (single stage)."""
    if config.distill is not None:
        raise ValueError("train_teacher expects a config without distillation settings")
    model = build_model(config.model_kind, config.scale, config.arch_overrides, seed=config.seed)
    trainlog = fit(model, store, fold, config, _onehot_loss(store), config.epochs)
    _finish(model, trainlog, checkpoint_dir)
    return model, trainlog


def transfer_trunk(src: Model, dst: Model) -> int:
    """Copy the convolutional trunk of ``src`` into ``dst``; returns the trunk length."""
    n = trunk_size(src.specs)
    if trunk_size(dst.specs) != n or src.specs[:n] != dst.specs[:n]:
        raise ValueError("models do not share a convolutional trunk")
    for a, b in zip(src.layers[:n], dst.layers[:n]):
        for name, p in a.params.items():
            b.params[name].data = p.data.copy()
    return n


def trunk_activations(model: Model, x: np.ndarray) -> np.ndarray:
    n = trunk_size(model.specs)
    return model.run_layers(Tensor(x), stop=n)[-1].data


def train_multistep(config: TrainConfig, store: FeatureStore, fold: FoldManifest,
                    checkpoint_dir=None) -> tuple[Model, TrainLog]:
    """Stage 1 trains the CNN under a temporary max-pool head; stage 2 swaps
    in the GRU head and trains the whole network."""
    if config.model_kind != "spectrogram":
        raise ValueError("multi-step training applies to the spectrogram model")
    if config.distill is not None:
        raise ValueError("train_multistep expects a config without distillation settings")
    stage1_epochs = config.stage1_epochs if config.stage1_epochs is not None else config.epochs // 2
    stage2_epochs = config.epochs - stage1_epochs
    if stage1_epochs < 1 or stage2_epochs < 1:
        raise ValueError("multi-step training needs at least one epoch per stage")
    cnn = build_model("spectrogram_cnn", config.scale, config.arch_overrides, seed=config.seed)
    trainlog = fit(cnn, store, fold, config, _onehot_loss(store), stage1_epochs, stage=1)

    full = build_model("spectrogram", config.scale, config.arch_overrides, seed=config.seed)
    transfer_trunk(cnn, full)
    probe = store.singles("spectrogram", list(fold.train_ids)[:8])
    if not np.array_equal(trunk_activations(cnn, probe), trunk_activations(full, probe)):
        raise TrainingError("stage-2 trunk does not reproduce stage-1 activations")
    trainlog.extra["stage1_val_accuracy"] = trainlog.records[-1]["val_accuracy"]
    trainlog.extra["stage1_best_val_accuracy"] = accuracy(cnn, store, fold.val_ids)
    trainlog.extra["trunk_transfer_exact"] = True
    fit(full, store, fold, config, _onehot_loss(store), stage2_epochs, stage=2, trainlog=trainlog)
    _finish(full, trainlog, checkpoint_dir)
    return full, trainlog


def train_student(config: TrainConfig, teacher: Model, store: FeatureStore, fold: FoldManifest,
                  checkpoint_dir=None) -> tuple[Model, TrainLog]:
    """Minimize the distillation loss against a frozen teacher.

    Soft labels are re-extracted every epoch with epoch-derived partner
    seeds (``per-epoch``) or once up front (``fixed``).
    """
    dcfg = config.distill
    if dcfg is None:
        raise ValueError("train_student needs config.distill")
    if teacher.n_classes != store.dataset.n_classes:
        raise ValueError(f"teacher has {teacher.n_classes} classes, dataset has {store.dataset.n_classes}")
    teacher_arch = "spectrogram" if teacher.arch == "spectrogram_cnn" else teacher.arch
    if teacher_arch != config.model_kind:
        raise ValueError(f"teacher is a {teacher_arch} model but config.model_kind is {config.model_kind}")
    if config.init_from_teacher:
        student = teacher.copy()
    else:
        student = build_model(config.model_kind, config.scale, config.arch_overrides,
                              seed=config.seed + 1000)
    if student.embedding_dim != teacher.embedding_dim and dcfg.loss_weights[1]:
        raise ValueError("embedding distillation needs equal teacher/student embedding sizes")
    before = teacher.checksum()
    train_ids = list(fold.train_ids)
    soft: dict[str, distill.SoftLabelSet] = {}

    def refresh(epoch: int) -> None:
        if dcfg.partner_resample == "fixed" and soft:
            return
        partner_seed = config.seed * 100_003 + (epoch if dcfg.partner_resample == "per-epoch" else 0)
        soft["current"] = distill.extract_soft_labels(teacher, store, train_ids, dcfg, partner_seed,
                                                      pool_ids=train_ids)

    def loss_fn(batch, res):
        dist, t_emb = soft["current"].targets(batch)
        labels = _labels(store, batch)
        onehot = np.eye(student.n_classes)[labels]
        return distill.student_loss((res.probabilities, res.embedding), (dist, t_emb, onehot), dcfg)

    val_ids = list(fold.val_ids)
    val_soft = None
    if val_ids:
        val_soft = distill.extract_soft_labels(teacher, store, val_ids, dcfg, config.seed * 100_003,
                                               pool_ids=val_ids)

    def val_loss(model: Model) -> float:
        dist, t_emb = val_soft.targets(val_ids)
        onehot = np.eye(student.n_classes)[_labels(store, val_ids)]
        emb, probs = model.predict(store.singles(config.model_kind, val_ids))
        return distill.student_loss((probs, emb), (dist, t_emb, onehot), dcfg).item()

    trainlog = fit(student, store, fold, config, loss_fn, config.epochs, epoch_hook=refresh,
                   val_loss=val_loss if val_soft is not None else None)
    after = teacher.checksum()
    if after != before:
        raise TrainingError("teacher parameters changed during student training")
    trainlog.extra["teacher_checksum"] = before
    _finish(student, trainlog, checkpoint_dir)
    return student, trainlog
