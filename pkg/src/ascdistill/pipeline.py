"""End-to-end pipeline: data -> features -> teachers -> students -> SVMs ->
reports, with every expensive stage cached under a content hash."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import jsonschema
import numpy as np

from . import __version__
from . import synthgen
from .data import Dataset, load_dataset, write_dataset
from .distill import DistillConfig
from .dsp import read_spectrogram, stft_spectrogram, write_spectrogram
from .evaluation import (GridReport, ScoreReport, System, confusing_pair_delta, evaluate,
                         fit_system, provenance_header, run_grid)
from .features import FeatureConfig, FeatureStore
from .nnet import checkpoint
from .nnet.model import Model
from .svm import SvmModel
from .synthgen import FoldManifest
from .trainer import TrainConfig, TrainLog, train_multistep, train_student, train_teacher

log = logging.getLogger(__name__)

ARCHS = ("waveform", "spectrogram")

_train_props = {
    "epochs": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "minimum": 0},
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "scale": {"enum": ["desk", "paper"]},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "manifest": {"type": "string"},
                "classes": {"type": "integer", "minimum": 2},
                "per_class": {"type": "integer", "minimum": 1},
                "duration_s": {"type": "number", "exclusiveMinimum": 0},
                "rate": {"type": "integer", "minimum": 1},
                "folds": {"type": "integer", "minimum": 2},
            },
        },
        "features": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preemphasis": {"type": "number", "minimum": 0, "maximum": 1},
                "window_ms": {"type": "number", "exclusiveMinimum": 0},
                "hop_ms": {"type": "number", "exclusiveMinimum": 0},
                "n_coefficients": {"type": "integer", "minimum": 1},
                "bins": {"enum": ["lowest", "pooled"]},
            },
        },
        "teacher": {
            "type": "object",
            "additionalProperties": False,
            "properties": dict(_train_props, **{
                "stage1_epochs": {"type": ["integer", "null"], "minimum": 1},
                "multistep": {"type": "boolean"},
            }),
        },
        "student": {
            "type": "object",
            "additionalProperties": False,
            "properties": dict(_train_props, **{
                "init_from_teacher": {"type": "boolean"},
                "distill": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "point": {"enum": ["output", "embedding", "both"]},
                        "temperature": {"type": "number", "exclusiveMinimum": 0},
                        "softening": {"enum": ["probability", "logit"]},
                        "teacher_concat_count": {"type": "integer", "minimum": 1},
                        "loss_weights": {
                            "type": ["array", "null"], "minItems": 3, "maxItems": 3,
                            "items": {"type": "number", "minimum": 0},
                        },
                        "partner_resample": {"enum": ["per-epoch", "fixed"]},
                    },
                },
            }),
        },
        "svm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "C": {"type": "number", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "fold_id": {"type": "integer", "minimum": 1},
                "systems": {"type": "array", "minItems": 1, "uniqueItems": True,
                            "items": {"enum": list(ARCHS)}},
                "grids": {"type": "array", "uniqueItems": True,
                          "items": {"enum": ["table4", "table5"]}},
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/desk",
    "scale": "desk",
    "dataset": {"classes": 10, "per_class": 24, "duration_s": 1.0, "rate": 4000, "folds": 4},
    "features": FeatureConfig().to_dict(),
    "teacher": {"epochs": 30, "batch_size": 40, "lr": 0.001, "stage1_epochs": None, "multistep": True},
    "student": {"epochs": 30, "batch_size": 40, "lr": 0.001, "init_from_teacher": False,
                "distill": {"point": "embedding", "temperature": 5.0, "softening": "probability",
                            "teacher_concat_count": 2, "loss_weights": None,
                            "partner_resample": "per-epoch"}},
    "svm": {"C": 1.0, "epochs": 200},
    "eval": {"fold_id": 1, "systems": ["waveform", "spectrogram"], "grids": []},
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dataset":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(source, seed: Optional[int] = None) -> dict:
    """Validate a pipeline config (path or dict) and fill defaults.

    Seed precedence: ``seed`` argument, then the config, then ``ASC_SEED``.
    """
    if isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {source}: {e}") from None
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {e.message}") from None
    if "manifest" in raw.get("dataset", {}) and len(raw["dataset"]) > 1:
        raise ConfigError("dataset.manifest excludes synthetic dataset parameters")
    cfg = _deep_merge(DEFAULTS, raw)
    if "manifest" not in cfg["dataset"]:
        cfg["dataset"] = _deep_merge(DEFAULTS["dataset"], cfg["dataset"])
    if seed is not None:
        cfg["seed"] = int(seed)
    elif "seed" not in raw and os.environ.get("ASC_SEED"):
        cfg["seed"] = int(os.environ["ASC_SEED"])
    try:
        DistillConfig.from_dict(cfg["student"]["distill"])
    except ValueError as e:
        raise ConfigError(f"invalid config at student/distill: {e}") from None
    return cfg


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def _key(*parts) -> str:
    text = json.dumps([__version__, *parts], sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class StageCache:
    root: Path
    force: bool = False
    events: list = field(default_factory=list)

    def run(self, stage: str, key: str, build: Callable[[Path], None],
            load: Callable[[Path], object]):
        """Return ``load(dir)``, calling ``build(dir)`` first on a miss."""
        d = self.root / f"{stage}-{key}"
        done = d / "DONE"
        hit = done.exists() and not self.force
        try:
            if not hit:
                if d.exists():
                    shutil.rmtree(d)
                tmp = d.with_name(d.name + ".tmp")
                if tmp.exists():
                    shutil.rmtree(tmp)
                tmp.mkdir(parents=True)
                build(tmp)
                tmp.rename(d)
                done.write_text(key + "\n")
            out = load(d)
        except StageError:
            raise
        except Exception as e:  # noqa: BLE001 - reported with the stage name
            raise StageError(stage, str(e)) from e
        self.events.append((stage, "cache hit" if hit else "computed"))
        log.info("stage %s: %s", stage, "cache hit" if hit else "computed")
        return out


@dataclass
class RunResult:
    config: dict
    baseline: ScoreReport
    distilled: ScoreReport
    grids: dict
    events: list
    report_dir: Path

    def summary(self) -> dict:
        return {"baseline": self.baseline.accuracy, "distilled": self.distilled.accuracy}


def teacher_config(cfg: dict, arch: str) -> TrainConfig:
    t = cfg["teacher"]
    return TrainConfig(arch, cfg["scale"], t["epochs"], t["batch_size"], t["lr"], cfg["seed"],
                       cfg["eval"]["fold_id"], None, t["stage1_epochs"])


def student_config(cfg: dict, arch: str, distill: Optional[dict] = None) -> TrainConfig:
    s = cfg["student"]
    d = DistillConfig.from_dict(distill if distill is not None else s["distill"])
    return TrainConfig(arch, cfg["scale"], s["epochs"], s["batch_size"], s["lr"], cfg["seed"],
                       cfg["eval"]["fold_id"], d, None, s["init_from_teacher"])


def _fold(folds: list[FoldManifest], fold_id: int) -> FoldManifest:
    for f in folds:
        if f.fold_id == fold_id:
            return f
    raise ValueError(f"fold {fold_id} not found (have {[f.fold_id for f in folds]})")


def _save_model(model: Model, trainlog: TrainLog, d: Path) -> None:
    checkpoint.save(model, d / "model.ckpt")
    trainlog.checkpoint_path = "model.ckpt"
    trainlog.to_jsonl(d / "trainlog.jsonl")


class Pipeline:
    def __init__(self, cfg: dict, out_dir=None, force: bool = False, jobs: int = 1):
        self.cfg = cfg
        self.out = Path(out_dir if out_dir is not None else cfg["output_dir"])
        self.cache = StageCache(self.out / "cache", force)
        self.jobs = jobs
        self.provenance = {"config_hash": config_hash(cfg), "seed": cfg["seed"],
                           "version": __version__}
        self._data_key = None

    # -- stages --------------------------------------------------------------

    def data(self) -> tuple[Dataset, list[FoldManifest]]:
        d = self.cfg["dataset"]
        if "manifest" in d:
            path = Path(d["manifest"])
            root = path.parent if path.is_file() else path
            self._data_key = _key("manifest", hashlib.sha256(
                (root / "manifest.jsonl").read_bytes() + (root / "folds.json").read_bytes()).hexdigest())
            return self.cache.run("data", self._data_key, lambda _: None,
                                  lambda _: load_dataset(root))
        self._data_key = _key("synthetic", d, self.cfg["seed"])

        def build(out: Path) -> None:
            ds, folds = generate(self.cfg["seed"], d["classes"], d["per_class"], d["duration_s"],
                                 d["rate"], d["folds"])
            write_dataset(ds, folds, out)

        return self.cache.run("data", self._data_key, build, load_dataset)

    def features(self, dataset: Dataset) -> FeatureStore:
        fcfg = FeatureConfig(**self.cfg["features"])
        store = FeatureStore(dataset, fcfg, self.jobs)
        key = _key(self._data_key, fcfg.to_dict())

        def build(out: Path) -> None:
            extract_features(dataset, fcfg, out)

        def load(d: Path) -> FeatureStore:
            for sid in dataset.ids:
                store.preload("spectrogram", sid, read_spectrogram(d / f"{sid}.spec").frames)
            return store

        return self.cache.run("features", key, build, load)

    def teacher(self, arch: str, store: FeatureStore, fold: FoldManifest) -> Model:
        tc = teacher_config(self.cfg, arch)
        multistep = arch == "spectrogram" and self.cfg["teacher"]["multistep"]
        key = _key(self._data_key, self.cfg["features"], tc.to_dict(), multistep)

        def build(out: Path) -> None:
            if multistep:
                model, tl = train_multistep(tc, store, fold)
            else:
                model, tl = train_teacher(tc, store, fold)
            _save_model(model, tl, out)

        return self.cache.run(f"teacher-{arch}", key, build,
                              lambda d: checkpoint.load(d / "model.ckpt")[0])

    def student(self, arch: str, teacher: Model, store: FeatureStore, fold: FoldManifest,
                distill: Optional[dict] = None) -> Model:
        sc = student_config(self.cfg, arch, distill)
        key = _key(self._data_key, self.cfg["features"], sc.to_dict(), teacher.checksum())

        def build(out: Path) -> None:
            model, tl = train_student(sc, teacher, store, fold)
            _save_model(model, tl, out)

        tag = f"{sc.distill.point}-T{sc.distill.temperature:g}-c{sc.distill.teacher_concat_count}"
        return self.cache.run(f"student-{arch}-{tag}", key, build,
                              lambda d: checkpoint.load(d / "model.ckpt")[0])

    def system(self, name: str, model: Model, store: FeatureStore, fold: FoldManifest) -> System:
        s = self.cfg["svm"]
        key = _key(self._data_key, self.cfg["features"], model.checksum(), s, self.cfg["seed"],
                   fold.to_dict())

        def build(out: Path) -> None:
            fit_system(name, model, store, fold, s["C"], s["epochs"], self.cfg["seed"]).svm.save(
                out / "svm.json")

        svm = self.cache.run(f"svm-{name}", key, build, lambda d: SvmModel.load(d / "svm.json"))
        return System(name, model, svm)

    # -- full run --------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        dataset, folds = self.data()
        fold = _fold(folds, cfg["eval"]["fold_id"])
        store = self.features(dataset)
        archs = cfg["eval"]["systems"]
        teachers = {a: self.teacher(a, store, fold) for a in archs}
        students = {a: self.student(a, teachers[a], store, fold) for a in archs}
        before = evaluate([self.system(a, teachers[a], store, fold) for a in archs],
                          store, fold, self.provenance)
        after = evaluate([self.system(a, students[a], store, fold) for a in archs],
                         store, fold, self.provenance)
        grids = {}
        if cfg["eval"]["grids"]:
            arch = "spectrogram" if "spectrogram" in archs else archs[0]
            teacher = teachers.get(arch) or self.teacher(arch, store, fold)
            for table in cfg["eval"]["grids"]:
                grids[table] = self.grid(table, teacher, store, fold)
        report_dir = self.write_reports(before, after, grids)
        return RunResult(cfg, before, after, grids, list(self.cache.events), report_dir)

    def grid(self, table: str, teacher: Model, store: FeatureStore, fold: FoldManifest) -> GridReport:
        arch = "spectrogram" if teacher.arch.startswith("spectrogram") else teacher.arch
        base = student_config(self.cfg, arch)

        def train(cfg_cell: TrainConfig) -> Model:
            return self.student(arch, teacher, store, fold, cfg_cell.distill.to_dict())

        def score(model: Model) -> System:
            return self.system("student", model, store, fold)

        return run_grid(table, store, fold, teacher, base, self.cfg["svm"]["C"],
                        self.cfg["svm"]["epochs"], self.provenance, train_fn=train, system_fn=score)

    def write_reports(self, before: ScoreReport, after: ScoreReport, grids: dict) -> Path:
        rd = self.out / "reports"
        rd.mkdir(parents=True, exist_ok=True)
        before.write(rd, "baseline")
        after.write(rd, "distilled")
        summary = {"provenance": self.provenance,
                   "rows": [{"system": k, "without_ts": before.accuracy[k], "with_ts": after.accuracy[k]}
                            for k in before.accuracy]}
        (rd / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        buf = io.StringIO()
        buf.write(provenance_header(self.provenance))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["system", "W/O TS", "W/ TS"])
        for row in summary["rows"]:
            w.writerow([row["system"], f"{100 * row['without_ts']:.2f}", f"{100 * row['with_ts']:.2f}"])
        (rd / "summary.csv").write_text(buf.getvalue())
        buf = io.StringIO()
        buf.write(provenance_header(self.provenance))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_a", "class_b", "before", "after", "delta"])
        for d in confusing_pair_delta(before, after):
            w.writerow([d.pair[0], d.pair[1], d.before, d.after, d.delta])
        (rd / "pair_delta.csv").write_text(buf.getvalue())
        for g in grids.values():
            g.write(rd)
        return rd


def generate(seed: int, classes: int = 10, per_class: int = 24, duration_s: float = 1.0,
             rate: int = 4000, n_folds: int = 4) -> tuple[Dataset, list[FoldManifest]]:
    bank = synthgen.default_scene_bank(seed, n_classes=classes)
    segments = synthgen.generate_corpus(bank, per_class, duration_s, rate, seed)
    folds = synthgen.make_folds(segments, n_folds, seed)
    return Dataset(segments, classes), folds


def extract_features(dataset: Dataset, fcfg: FeatureConfig, out_dir) -> Path:
    """Write one spectrogram file (plus JSON sidecar) per segment."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sid in dataset.ids:
        spec = stft_spectrogram(dataset[sid], fcfg.window_ms, fcfg.hop_ms, fcfg.n_coefficients,
                                fcfg.bins)
        write_spectrogram(spec, out / f"{sid}.spec")
    (out / "features.json").write_text(json.dumps(fcfg.to_dict(), sort_keys=True) + "\n")
    return out


def run(source, out_dir=None, force: bool = False, jobs: int = 1,
        seed: Optional[int] = None) -> RunResult:
    cfg = load_config(source, seed)
    return Pipeline(cfg, out_dir, force, jobs).run()
