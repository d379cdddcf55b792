"""Synthetic acoustic scenes built from shared noise sources.

Every class is a fixed mixture of a small set of band-limited, amplitude
modulated noise sources. Because sources are shared, some classes sound
alike by construction; two pairs are engineered to be confusable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import AudioSegment

N_BANDS = 16
PEAK = 0.9
LOCATION_BATCH = 4
# (class_a, class_b, source_a, source_b): both classes put >= 0.2 on both sources
CONFUSABLE_PAIRS = ((0, 1, 0, 1), (2, 3, 2, 3))


@dataclass(frozen=True)
class Source:
    envelope: np.ndarray  # per-band amplitude, length N_BANDS
    mod_rate_hz: float
    mod_depth: float


@dataclass(frozen=True)
class SceneBank:
    n_classes: int
    sources: tuple
    mixing: np.ndarray  # (K, S), rows sum to 1
    noise_floor: float = 0.05
    weight_jitter: float = 0.35
    confusable_pairs: tuple = ()
    seed: int = 0

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    def band_profile(self, cls: int) -> np.ndarray:
        """Expected per-band energy of class ``cls`` (before peak normalization)."""
        energy = np.zeros(N_BANDS)
        for w, src in zip(self.mixing[cls], self.sources):
            env2 = src.envelope ** 2
            energy += w * w * env2 / env2.mean()
        return energy + self.noise_floor ** 2


@dataclass
class FoldManifest:
    fold_id: int
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"fold_id": self.fold_id, "train_ids": list(self.train_ids),
                "val_ids": list(self.val_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldManifest":
        return cls(int(d["fold_id"]), list(d["train_ids"]), list(d["val_ids"]))


def default_scene_bank(seed: int = 0, n_classes: int = 10, n_sources: int = 6) -> SceneBank:
    rng = np.random.default_rng([seed, 0x5CE])
    band = np.arange(N_BANDS)
    sources = []
    centers = (np.arange(n_sources) + rng.uniform(0.2, 0.8, n_sources)) * N_BANDS / n_sources
    for s in range(n_sources):
        width = rng.uniform(1.5, 3.0)
        env = np.exp(-0.5 * ((band - centers[s]) / width) ** 2) + 0.02
        sources.append(Source(env, float(rng.uniform(0.5, 6.0)), float(rng.uniform(0.3, 0.8))))

    mixing = np.zeros((n_classes, n_sources))
    for k in range(n_classes):
        # sparse random mixture dominated by one or two sources
        mixing[k] = rng.dirichlet(np.full(n_sources, 0.4))
    for a, b, sa, sb in CONFUSABLE_PAIRS:
        if max(a, b) >= n_classes or max(sa, sb) >= n_sources:
            continue
        shared = rng.uniform(0.25, 0.35, 2)
        rest_a = rng.dirichlet(np.full(n_sources, 0.5)) * 0.25
        rest_b = rng.dirichlet(np.full(n_sources, 0.5)) * 0.25
        mixing[a] = rest_a
        mixing[b] = rest_b
        mixing[a, sa] += shared[0] + 0.1
        mixing[a, sb] += shared[1]
        mixing[b, sa] += shared[1]
        mixing[b, sb] += shared[0] + 0.1
    mixing /= mixing.sum(axis=1, keepdims=True)
    pairs = tuple((a, b) for a, b, _, _ in CONFUSABLE_PAIRS if max(a, b) < n_classes)
    return SceneBank(n_classes, tuple(sources), mixing, confusable_pairs=pairs, seed=seed)


def _band_noise(rng: np.random.Generator, n: int, envelope: np.ndarray) -> np.ndarray:
    """White noise shaped in the DFT domain, scaled to unit RMS."""
    spec = np.fft.rfft(rng.standard_normal(n))
    pos = np.linspace(0.0, N_BANDS - 1, spec.size)
    spec *= np.interp(pos, np.arange(N_BANDS), envelope)
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x * x))


def generate_segment(bank: SceneBank, cls: int, duration_s: float, sample_rate: int,
                     seed: int, segment_id: str = "", location_id: str = "",
                     n_channels: int = 2) -> AudioSegment:
    if not 0 <= cls < bank.n_classes:
        raise ValueError(f"class {cls} out of range for {bank.n_classes} classes")
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    rng = np.random.default_rng([seed, cls, 0xA5C])
    n = int(round(duration_s * sample_rate))
    w = bank.mixing[cls] * np.exp(bank.weight_jitter * rng.standard_normal(bank.n_sources))
    w /= w.sum()
    t = np.arange(n) / sample_rate
    phases = rng.uniform(0.0, 2 * np.pi, bank.n_sources)
    out = np.zeros((n_channels, n))
    for s, src in enumerate(bank.sources):
        mod = 1.0 + src.mod_depth * np.sin(2 * np.pi * src.mod_rate_hz * t + phases[s])
        for c in range(n_channels):
            out[c] += w[s] * mod * _band_noise(rng, n, src.envelope)
    out += bank.noise_floor * rng.standard_normal((n_channels, n))
    out *= PEAK / np.max(np.abs(out))
    return AudioSegment(out, sample_rate, cls, location_id, segment_id)


def segment_name(cls: int, index: int) -> str:
    return f"c{cls:02d}_s{index:04d}"


def generate_corpus(bank: SceneBank, per_class: int = 24, duration_s: float = 1.0,
                    sample_rate: int = 4000, seed: int = 0, n_channels: int = 2) -> list[AudioSegment]:
    """``per_class`` segments per class; every run of 4 shares a location id."""
    out = []
    for cls in range(bank.n_classes):
        for i in range(per_class):
            out.append(generate_segment(
                bank, cls, duration_s, sample_rate,
                seed=seed * 1_000_003 + cls * 10_007 + i,
                segment_id=segment_name(cls, i),
                location_id=f"c{cls:02d}_loc{i // LOCATION_BATCH:02d}",
                n_channels=n_channels))
    return out


def make_folds(segments: list[AudioSegment], n_folds: int = 4, seed: int = 0) -> list[FoldManifest]:
    """Location-disjoint folds; fold ids start at 1."""
    if n_folds < 2:
        raise ValueError("cross-validation requires >= 2 folds")
    locs_by_class: dict[int, list] = {}
    for s in segments:
        if not s.location_id:
            raise ValueError(f"segment {s.segment_id} has no location_id")
        locs = locs_by_class.setdefault(s.label, [])
        if s.location_id not in locs:
            locs.append(s.location_id)
    rng = np.random.default_rng([seed, 0xF01D])
    fold_of: dict[str, int] = {}
    for cls in sorted(locs_by_class):
        locs = sorted(locs_by_class[cls])
        if len(locs) < n_folds:
            raise ValueError("insufficient locations for disjoint folds")
        order = rng.permutation(len(locs))
        for rank, j in enumerate(order):
            loc = locs[j]
            if loc in fold_of:
                continue  # location shared across classes keeps its first fold
            fold_of[loc] = (rank + cls) % n_folds
    folds = []
    for f in range(n_folds):
        val = [s.segment_id for s in segments if fold_of[s.location_id] == f]
        train = [s.segment_id for s in segments if fold_of[s.location_id] != f]
        folds.append(FoldManifest(f + 1, train, val))
    return folds
