"""Dataset container plus the on-disk layout shared by generated and
external corpora: WAV files, ``manifest.jsonl`` and ``folds.json``."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

from .dsp import AudioSegment, read_wav, write_wav
from .synthgen import FoldManifest


class Dataset:
    """Ordered mapping of segment id to :class:`AudioSegment`."""

    def __init__(self, segments: Iterable[AudioSegment], n_classes: Optional[int] = None,
                 class_names: Optional[list] = None):
        self.segments: dict[str, AudioSegment] = {}
        for s in segments:
            if s.segment_id in self.segments:
                raise ValueError(f"duplicate segment id {s.segment_id!r}")
            self.segments[s.segment_id] = s
        top = max((s.label for s in self.segments.values()), default=-1) + 1
        self.n_classes = n_classes if n_classes is not None else top
        if top > self.n_classes:
            raise ValueError(f"label {top - 1} out of range for {self.n_classes} classes")
        self.class_names = class_names or [f"class{k}" for k in range(self.n_classes)]

    def __len__(self) -> int:
        return len(self.segments)

    def __getitem__(self, sid: str) -> AudioSegment:
        try:
            return self.segments[sid]
        except KeyError:
            raise KeyError(f"unknown segment id {sid!r}") from None

    def __contains__(self, sid) -> bool:
        return sid in self.segments

    @property
    def ids(self) -> list[str]:
        return list(self.segments)

    def labels(self, ids: Iterable[str]) -> list[int]:
        return [self[i].label for i in ids]

    def ids_by_class(self, ids: Optional[Iterable[str]] = None) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {k: [] for k in range(self.n_classes)}
        for sid in (self.ids if ids is None else ids):
            out[self[sid].label].append(sid)
        return out

    def check_ids(self, ids: Iterable[str]) -> None:
        missing = [i for i in ids if i not in self.segments]
        if missing:
            raise KeyError(f"unknown segment ids: {missing[:5]}{' ...' if len(missing) > 5 else ''}")


def write_dataset(dataset: Dataset, folds: list[FoldManifest], out_dir) -> Path:
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    lines = []
    for sid, seg in dataset.segments.items():
        rel = f"audio/{sid}.wav"
        write_wav(seg, out / rel)
        lines.append(json.dumps({"id": sid, "path": rel, "class": seg.label,
                                 "location_id": seg.location_id}, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"n_classes": dataset.n_classes, "class_names": dataset.class_names,
            "folds": [f.to_dict() for f in folds]}
    (out / "folds.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out


def read_manifest(path) -> list[dict]:
    records = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in ("id", "path", "class", "location_id"):
            if key not in rec:
                raise ValueError(f"{path}:{n}: manifest record missing {key!r}")
        records.append(rec)
    return records


def load_dataset(path) -> tuple[Dataset, list[FoldManifest]]:
    """Load a dataset directory (or a manifest file inside one).

    Class fields may be integers or names; names are indexed in order of
    first appearance unless ``folds.json`` lists ``class_names``.
    """
    path = Path(path)
    manifest = path if path.is_file() else path / "manifest.jsonl"
    root = manifest.parent
    records = read_manifest(manifest)
    folds_path = root / "folds.json"
    meta = json.loads(folds_path.read_text()) if folds_path.exists() else {}
    names = meta.get("class_names")
    index: dict = {}
    if names:
        index = {n: i for i, n in enumerate(names)}
    segments = []
    for rec in records:
        cls = rec["class"]
        if isinstance(cls, str) and not cls.isdigit():
            label = index.setdefault(cls, len(index))
        else:
            label = int(cls)
        p = Path(rec["path"])
        seg = read_wav(p if p.is_absolute() else root / p, label, str(rec["location_id"]), str(rec["id"]))
        segments.append(seg)
    n_classes = meta.get("n_classes")
    if names is None and index:
        names = list(index)
    dataset = Dataset(segments, n_classes=n_classes, class_names=names)
    folds = [FoldManifest.from_dict(f) for f in meta.get("folds", [])]
    return dataset, folds
