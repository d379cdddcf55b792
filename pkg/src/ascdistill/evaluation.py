"""Scoring, confusion matrices, experiment grids and embedding export.

Every system is a frozen network plus a linear SVM on its embeddings.
Ensembles average the SVM decision values; argmax ties go to the lowest
class index, exactly as in :func:`ascdistill.svm.predict`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .distill import DistillConfig
from .features import FeatureStore
from .nnet.model import Model
from .svm import SvmModel, ensemble_scores, predict, svm_scores, train_svm
from .synthgen import FoldManifest

TABLE4_TEMPERATURES = (1.0, 5.0, 10.0)
TABLE4_CONCAT = (1, 2)
TABLE5_POINTS = ("output", "both", "embedding")
TABLE5_LABELS = {"output": "output layer", "both": "output & last hidden layer",
                 "embedding": "last hidden layer"}


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def provenance_header(provenance: dict) -> str:
    """One-line comment prepended to CSV outputs."""
    return (f"# ascdistill {__version__} config_hash={provenance.get('config_hash', 'none')} "
            f"seed={provenance.get('seed', 'none')}\n")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K); rows true class, columns predicted

    @classmethod
    def from_predictions(cls, labels, predictions, n_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels, dtype=int), np.asarray(predictions, dtype=int)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else float("nan")

    def pair_mass(self, a: int, b: int) -> int:
        """Symmetric off-diagonal mass C[a][b] + C[b][a]."""
        return int(self.counts[a, b] + self.counts[b, a])

    def most_confused_pair(self) -> tuple[int, int]:
        k = len(self.counts)
        pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
        return max(pairs, key=lambda p: (self.pair_mass(*p), -p[0], -p[1]))

    def to_csv(self, path, provenance: Optional[dict] = None) -> None:
        buf = io.StringIO()
        if provenance is not None:
            buf.write(provenance_header(provenance))
        w = csv.writer(buf, lineterminator="\n")
        k = len(self.counts)
        w.writerow(["true\\pred"] + list(range(k)))
        for i in range(k):
            w.writerow([i] + self.counts[i].tolist())
        Path(path).write_text(buf.getvalue())


@dataclass
class System:
    name: str
    model: Model
    svm: SvmModel

    @property
    def arch(self) -> str:
        return "spectrogram" if self.model.arch.startswith("spectrogram") else self.model.arch


def embed(model: Model, store: FeatureStore, ids: Sequence[str], batch_size: int = 64) -> np.ndarray:
    arch = "spectrogram" if model.arch.startswith("spectrogram") else model.arch
    emb, _ = model.predict(store.singles(arch, ids), batch_size)
    return emb


def fit_system(name: str, model: Model, store: FeatureStore, fold: FoldManifest,
               C: float = 1.0, epochs: int = 200, seed: int = 0) -> System:
    """Train the scoring SVM on the model's train-split embeddings."""
    ids = list(fold.train_ids)
    svm = train_svm(embed(model, store, ids), store.dataset.labels(ids), C=C, epochs=epochs,
                    seed=seed, n_classes=store.dataset.n_classes)
    return System(name, model, svm)


@dataclass
class ScoreReport:
    fold_id: int
    segment_ids: list
    labels: np.ndarray
    scores: dict  # system name -> (n, K) decision values
    ensemble: np.ndarray
    predictions: dict  # system name (and "ensemble") -> (n,)
    accuracy: dict
    confusion: dict  # system name -> ConfusionMatrix
    provenance: dict = field(default_factory=dict)

    @property
    def systems(self) -> list[str]:
        return list(self.scores)

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "provenance": self.provenance,
            "accuracy": self.accuracy,
            "confusion": {k: v.counts.tolist() for k, v in self.confusion.items()},
            "segments": [
                {"segment_id": sid, "label": int(self.labels[i]),
                 "scores": {k: v[i].tolist() for k, v in self.scores.items()},
                 "ensemble": self.ensemble[i].tolist(),
                 "prediction": int(self.predictions["ensemble"][i])}
                for i, sid in enumerate(self.segment_ids)
            ],
        }

    def write(self, out_dir, stem: str = "report") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.json"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        buf = io.StringIO()
        buf.write(provenance_header(self.provenance))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["system", "accuracy"])
        for name, acc in self.accuracy.items():
            w.writerow([name, f"{acc:.6f}"])
        paths.append(out / f"{stem}_accuracy.csv")
        paths[-1].write_text(buf.getvalue())
        for name, cm in self.confusion.items():
            paths.append(out / f"{stem}_confusion_{name}.csv")
            cm.to_csv(paths[-1], self.provenance)
        return paths


def _as_system(i: int, s) -> System:
    if isinstance(s, System):
        return s
    model, svm = s
    return System(f"{model.arch}{i}" if i else model.arch, model, svm)


def evaluate(systems: Sequence, store: FeatureStore, fold: FoldManifest,
             provenance: Optional[dict] = None) -> ScoreReport:
    """Score the fold's validation segments with every system and their ensemble.

    ``systems`` holds :class:`System` objects or (Model, SvmModel) pairs.
    """
    if not systems:
        raise ValueError("evaluate needs at least one system")
    systems = [_as_system(i, s) for i, s in enumerate(systems)]
    names = [s.name for s in systems]
    if len(set(names)) != len(names) or "ensemble" in names:
        raise ValueError(f"system names must be unique and not 'ensemble': {names}")
    ids = list(fold.val_ids)
    store.dataset.check_ids(ids)
    labels = np.asarray(store.dataset.labels(ids), dtype=int)
    k = store.dataset.n_classes
    scores = {s.name: svm_scores(s.svm, embed(s.model, store, ids)) for s in systems}
    ens = ensemble_scores(list(scores.values()))
    preds = {name: predict(v) for name, v in scores.items()}
    preds["ensemble"] = predict(ens)
    confusion = {name: ConfusionMatrix.from_predictions(labels, p, k) for name, p in preds.items()}
    accuracy = {name: cm.accuracy for name, cm in confusion.items()}
    return ScoreReport(fold.fold_id, ids, labels, scores, ens, preds, accuracy, confusion,
                       dict(provenance or {}))


@dataclass
class PairDelta:
    pair: tuple
    before: int
    after: int

    @property
    def delta(self) -> int:
        return self.after - self.before


def confusing_pair_delta(before: ScoreReport, after: ScoreReport,
                         system: str = "ensemble") -> list[PairDelta]:
    """Symmetric confusion mass per class pair, before vs after; most confused first."""
    if before.fold_id != after.fold_id or before.segment_ids != after.segment_ids:
        raise ValueError("reports come from mismatched folds")
    cb, ca = before.confusion[system], after.confusion[system]
    k = len(cb.counts)
    out = [PairDelta((a, b), cb.pair_mass(a, b), ca.pair_mass(a, b))
           for a in range(k) for b in range(a + 1, k)]
    out.sort(key=lambda d: (-d.before, d.pair))
    return out


# -- grids ---------------------------------------------------------------------


@dataclass
class GridReport:
    table: str
    row_name: str
    rows: list
    columns: list
    cells: dict  # (row, column) -> accuracy
    provenance: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(provenance_header(self.provenance))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.row_name] + [str(c) for c in self.columns])
        for r in self.rows:
            w.writerow([r] + [f"{100 * self.cells[(r, c)]:.2f}" for c in self.columns])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "table": self.table, "rows": self.rows, "columns": self.columns,
            "cells": [{"row": r, "column": c, "accuracy": self.cells[(r, c)]}
                      for r in self.rows for c in self.columns],
            "provenance": self.provenance, "details": self.details,
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        c, j = out / f"{self.table}.csv", out / f"{self.table}.json"
        c.write_text(self.to_csv())
        j.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return c, j


def grid_cells(table: str, base: DistillConfig) -> list[tuple[object, object, DistillConfig]]:
    """(row, column, distillation config) for each cell of a table layout."""
    if table == "table4":
        return [(t, n, replace(base, point="output", temperature=t, teacher_concat_count=n,
                               loss_weights=None))
                for t in TABLE4_TEMPERATURES for n in TABLE4_CONCAT]
    if table == "table5":
        return [(TABLE5_LABELS[p], "accuracy", replace(base, point=p, loss_weights=None))
                for p in TABLE5_POINTS]
    raise ValueError(f"unknown grid {table!r}; expected 'table4' or 'table5'")


def run_grid(table: str, store: FeatureStore, fold: FoldManifest, teacher: Model,
             student_config, svm_C: float = 1.0, svm_epochs: int = 200,
             provenance: Optional[dict] = None,
             train_fn: Optional[Callable] = None,
             system_fn: Optional[Callable] = None) -> GridReport:
    """Train one student per cell against a shared teacher and score it with its SVM.

    ``train_fn(config) -> Model`` and ``system_fn(model) -> System`` replace
    the default training and SVM fitting (the pipeline passes cached ones).
    """
    from .trainer import train_student

    if train_fn is None:
        def train_fn(cfg):
            return train_student(cfg, teacher, store, fold)[0]
    if system_fn is None:
        def system_fn(model):
            return fit_system("student", model, store, fold, svm_C, svm_epochs, student_config.seed)

    base = student_config.distill or DistillConfig(temperature=5.0, teacher_concat_count=2)
    cells, details = {}, {}
    rows, columns = [], []
    seg_s = store.dataset[store.dataset.ids[0]].duration_s
    for row, col, dcfg in grid_cells(table, base):
        label = f"{seg_s * col:g} s" if table == "table4" else col
        if row not in rows:
            rows.append(row)
        if label not in columns:
            columns.append(label)
        student = train_fn(replace(student_config, distill=dcfg))
        system = system_fn(student)
        report = evaluate([system], store, fold)
        cells[(row, label)] = report.accuracy[system.name]
        details[f"{row}|{label}"] = {"distill": dcfg.to_dict(), "student_checksum": student.checksum()}
    prov = dict(provenance or {})
    prov.setdefault("teacher_checksum", teacher.checksum())
    return GridReport(table, "T" if table == "table4" else "point", rows, columns, cells, prov, details)


def export_embeddings(model: Model, store: FeatureStore, ids: Sequence[str], path=None) -> str:
    """CSV with segment_id, label and one column per embedding dimension."""
    ids = list(ids)
    store.dataset.check_ids(ids)
    emb = embed(model, store, ids)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["segment_id", "label"] + [f"e{i}" for i in range(emb.shape[1])])
    for sid, lab, row in zip(ids, store.dataset.labels(ids), emb):
        w.writerow([sid, lab] + [repr(float(v)) for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
