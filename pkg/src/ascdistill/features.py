"""Turn (possibly concatenated) audio segments into model inputs."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .dsp import AudioSegment, concat_segments, preemphasis, stft_spectrogram


@dataclass(frozen=True)
class FeatureConfig:
    preemphasis: float = 0.97
    window_ms: float = 100.0
    hop_ms: float = 40.0
    n_coefficients: int = 32
    bins: str = "pooled"

    @classmethod
    def paper(cls) -> "FeatureConfig":
        return cls(n_coefficients=256, bins="lowest")

    def to_dict(self) -> dict:
        return asdict(self)


def model_input(arch: str, segment: AudioSegment, cfg: FeatureConfig) -> np.ndarray:
    """Per-example input array: (L, C) for waveform, (frames, coefs, C) otherwise."""
    if arch == "waveform":
        return np.ascontiguousarray(preemphasis(segment, cfg.preemphasis).samples.T)
    if arch.startswith("spectrogram"):
        return stft_spectrogram(segment, cfg.window_ms, cfg.hop_ms, cfg.n_coefficients, cfg.bins).frames
    raise ValueError(f"unknown architecture {arch!r}")


class FeatureStore:
    """Caches single-segment inputs; concatenations are computed on demand
    from the joined audio so boundary samples and frames are exact."""

    def __init__(self, dataset: Dataset, cfg: FeatureConfig, jobs: int = 1):
        self.dataset = dataset
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self._cache: dict[tuple, np.ndarray] = {}

    def one(self, arch: str, ids: Sequence[str]) -> np.ndarray:
        ids = tuple(ids)
        key = (arch,) + ids
        if len(ids) == 1 and key in self._cache:
            return self._cache[key]
        seg = concat_segments([self.dataset[i] for i in ids])
        x = model_input(arch, seg, self.cfg)
        if len(ids) == 1:
            self._cache[key] = x
        return x

    def preload(self, arch: str, segment_id: str, x: np.ndarray) -> None:
        """Seed the cache with a precomputed single-segment input."""
        self.dataset.check_ids([segment_id])
        self._cache[(arch, segment_id)] = np.asarray(x, dtype=np.float64)

    def batch(self, arch: str, groups: Sequence[Sequence[str]]) -> np.ndarray:
        """Stack inputs for each id group; results are order-preserving for any ``jobs``."""
        if self.jobs > 1 and len(groups) > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                xs = list(pool.map(lambda g: self.one(arch, g), groups))
        else:
            xs = [self.one(arch, g) for g in groups]
        return np.stack(xs)

    def singles(self, arch: str, ids: Sequence[str]) -> np.ndarray:
        return self.batch(arch, [(i,) for i in ids])
