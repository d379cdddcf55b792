"""Audio front-end: pre-emphasis, STFT log-magnitude spectrograms, segment
concatenation, and WAV / spectrogram file I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

DEFAULT_PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10
SPEC_MAGIC = b"ASCSPEC1"


@dataclass(frozen=True)
class AudioSegment:
    """Multichannel audio clip; ``samples`` has shape (n_channels, n_samples)."""

    samples: np.ndarray
    sample_rate: int
    label: int
    location_id: str = ""
    segment_id: str = ""

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError(f"samples must be (channels, length), got shape {s.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.label < 0:
            raise ValueError("label must be a nonnegative class index")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    frames: np.ndarray  # (n_frames, n_coefficients, n_channels)
    window_len_samples: int
    hop_samples: int
    n_coefficients: int
    label: int = 0
    segment_id: str = ""
    bins: str = "lowest"
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def preemphasis(segment: AudioSegment, alpha: float = DEFAULT_PREEMPHASIS) -> AudioSegment:
    """y[0] = x[0], y[n] = x[n] - alpha * x[n-1], per channel."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"pre-emphasis alpha must be in [0, 1], got {alpha}")
    x = segment.samples
    y = x.copy()
    y[:, 1:] = x[:, 1:] - alpha * x[:, :-1]
    return replace(segment, samples=y)


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, window_len: int, hop: int) -> int:
    padded = n_samples + (window_len - hop)
    return 1 + (padded - window_len) // hop


def _select_bins(mag: np.ndarray, n_coefficients: int, bins: str) -> np.ndarray:
    n_bins = mag.shape[-1]
    if n_coefficients > n_bins:
        raise ValueError(f"{n_coefficients} coefficients requested but the window has {n_bins} bins")
    if bins == "lowest":
        return mag[..., :n_coefficients]
    if bins == "pooled":
        # contiguous equal-width groups spanning DC..Nyquist
        edges = np.linspace(0, n_bins, n_coefficients + 1).round().astype(int)
        return np.stack([mag[..., a:b].mean(axis=-1) for a, b in zip(edges[:-1], edges[1:])], axis=-1)
    raise ValueError(f"bins must be 'lowest' or 'pooled', got {bins!r}")


def stft_spectrogram(segment: AudioSegment, window_ms: float = 100.0, hop_ms: float = 40.0,
                     n_coefficients: int = 256, bins: str = "lowest") -> Spectrogram:
    """Log-magnitude STFT with a periodic Hann window.

    The signal is tail-padded with ``window - hop`` zeros, so a 479,999-sample
    clip at 48 kHz with 100 ms / 40 ms framing yields 249 frames.
    """
    if window_ms < hop_ms:
        raise ValueError("window_ms must be >= hop_ms")
    win = int(round(segment.sample_rate * window_ms / 1000.0))
    hop = int(round(segment.sample_rate * hop_ms / 1000.0))
    if hop < 1:
        raise ValueError("hop shorter than one sample")
    if segment.n_samples < win:
        raise ValueError("segment too short")
    x = np.pad(segment.samples, ((0, 0), (0, win - hop)))
    frames = sliding_window_view(x, win, axis=1)[:, ::hop]  # (C, N, win)
    mag = np.abs(np.fft.rfft(frames * hann_periodic(win), axis=-1))
    mag = _select_bins(mag, n_coefficients, bins)
    out = np.log(mag + LOG_FLOOR).transpose(1, 2, 0)
    return Spectrogram(np.ascontiguousarray(out), win, hop, n_coefficients,
                       label=segment.label, segment_id=segment.segment_id, bins=bins)


def concat_segments(segments: Sequence[AudioSegment]) -> AudioSegment:
    """Join same-class segments end to end along time."""
    if not segments:
        raise ValueError("concat_segments needs at least one segment")
    first = segments[0]
    if len(segments) == 1:
        return first
    for s in segments[1:]:
        if s.sample_rate != first.sample_rate or s.n_channels != first.n_channels:
            raise ValueError("incompatible segments")
        if s.label != first.label:
            raise ValueError("cross-class concatenation forbidden")
    return AudioSegment(
        np.concatenate([s.samples for s in segments], axis=1),
        first.sample_rate,
        first.label,
        location_id=first.location_id,
        segment_id="+".join(s.segment_id for s in segments),
    )


# -- file formats --------------------------------------------------------------


def read_wav(path, label: int = 0, location_id: str = "", segment_id: Optional[str] = None) -> AudioSegment:
    """Read a PCM WAV (16/32-bit int or 32/64-bit float) scaled to [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype} in {path}")
    x = x.T if x.ndim == 2 else x[None, :]
    sid = segment_id if segment_id is not None else Path(path).stem
    return AudioSegment(x, int(rate), label, location_id, sid)


def write_wav(segment: AudioSegment, path, dtype: str = "float32") -> None:
    x = segment.samples.T
    if dtype == "int16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif dtype == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unsupported WAV dtype {dtype!r}")
    wavfile.write(str(path), segment.sample_rate, data if data.shape[1] > 1 else data[:, 0])


def write_spectrogram(spec: Spectrogram, path) -> None:
    """Binary tensor file plus a ``.json`` sidecar with framing metadata."""
    path = Path(path)
    n, k, c = spec.frames.shape
    with open(path, "wb") as f:
        f.write(SPEC_MAGIC)
        f.write(struct.pack("<3i", n, k, c))
        f.write(np.ascontiguousarray(spec.frames, dtype="<f8").tobytes())
    meta = {
        "shape": [n, k, c],
        "window_len_samples": spec.window_len_samples,
        "hop_samples": spec.hop_samples,
        "n_coefficients": spec.n_coefficients,
        "bins": spec.bins,
        "label": spec.label,
        "segment_id": spec.segment_id,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_spectrogram(path) -> Spectrogram:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != SPEC_MAGIC:
        raise ValueError(f"{path}: not a spectrogram file")
    n, k, c = struct.unpack("<3i", raw[8:20])
    frames = np.frombuffer(raw[20:], dtype="<f8")
    if frames.size != n * k * c:
        raise ValueError(f"{path}: truncated spectrogram data")
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Spectrogram(frames.reshape(n, k, c).astype(np.float64),
                       meta.get("window_len_samples", 0), meta.get("hop_samples", 0), k,
                       label=meta.get("label", 0), segment_id=meta.get("segment_id", ""),
                       bins=meta.get("bins", "lowest"))
