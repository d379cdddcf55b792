"""Model container plus the two architecture builders.

Paper-scale configurations reproduce the published layer shape tables
exactly; desk-scale configurations keep the same topology at sizes that
train in seconds on a CPU.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .layers import ArchitectureError, ConcatPools, Layer, LayerSpec, make_layer
from .tensor import Tape, TapeError, Tensor, no_record

WAVEFORM_CONFIGS = {
    "paper": {
        "input_shape": (479999, 2),
        "conv_channels": 64, "conv_kernel": 12, "conv_stride": 12,
        "res_channels": (64, 128, 128, 128, 128, 128, 128),
        "res_kernel": 3, "res_pool": 3,
        "embedding_dim": 64, "n_classes": 10, "activation": "leaky_relu",
    },
    "desk": {
        "input_shape": (3999, 2),
        "conv_channels": 16, "conv_kernel": 12, "conv_stride": 12,
        "res_channels": (16, 16, 16),
        "res_kernel": 3, "res_pool": 3,
        "embedding_dim": 64, "n_classes": 10, "activation": "leaky_relu",
    },
}

SPECTROGRAM_CONFIGS = {
    "paper": {
        "input_shape": (249, 256, 2),
        "conv_channels": 30, "conv_kernel": 7,
        # last block widened from 120 to 240 so the pooled rows can carry 240 channels
        "res_channels": (30, 60, 120, 240), "res_strides": (1, 2, 2, 3),
        "pool_width": None, "gru_units": None,
        "embedding_dim": 64, "n_classes": 10, "activation": "leaky_relu",
    },
    "desk": {
        "input_shape": (25, 32, 2),
        "conv_channels": 8, "conv_kernel": 7,
        "res_channels": (8, 16, 32, 32), "res_strides": (1, 2, 2, 3),
        "pool_width": None, "gru_units": None,
        "embedding_dim": 64, "n_classes": 10, "activation": "leaky_relu",
    },
}


@dataclass
class ForwardResult:
    embedding: Tensor
    logits: Tensor
    probabilities: Tensor
    tape: Optional[Tape] = None


class Model:
    """An ordered stack of layers ending in ``dense -> softmax``.

    The embedding is the output of the dense layer just before the output
    dense layer.
    """

    def __init__(self, specs: list[LayerSpec], input_shape: tuple, seed: int = 0,
                 arch: str = "custom", scale: str = "desk", config: Optional[dict] = None):
        self.specs = list(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = seed
        self.arch = arch
        self.scale = scale
        self.config = dict(config or {})
        self.layers: list[Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            try:
                layer = make_layer(spec, shape)
            except ArchitectureError as e:
                raise ArchitectureError(f"incomposable architecture at layer {i}: {e}") from None
            if any(d < 1 for d in layer.out_shape):
                raise ArchitectureError(
                    f"incomposable architecture at layer {i} ({spec.kind}): "
                    f"input {shape} -> output {layer.out_shape}")
            self.layers.append(layer)
            shape = layer.out_shape
        kinds = [s.kind for s in self.specs]
        if kinds.count("softmax") != 1 or kinds[-1] != "softmax":
            raise ArchitectureError("model needs exactly one softmax layer, placed last")
        if len(kinds) < 3 or kinds[-2] != "dense" or kinds[-3] != "dense":
            raise ArchitectureError("model must end with dense (embedding) -> dense -> softmax")
        self.embedding_index = len(self.layers) - 3
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng)

    # -- introspection ---------------------------------------------------------

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.layers[self.embedding_index].out_shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            tag = layer.spec.name or layer.spec.kind
            for pname, p in layer.params.items():
                out[f"{i:02d}.{tag}.{pname}"] = p
        return out

    def shape_table(self) -> list[tuple[str, tuple]]:
        """(layer name, per-example output shape), one row per table entry."""
        rows = []
        for layer in self.layers:
            if layer.spec.kind == "softmax":
                continue
            name = layer.spec.name or layer.spec.kind
            if isinstance(layer, ConcatPools):
                rows.append(("AvgPool", layer.pooled_shape()))
                rows.append(("MaxPool", layer.pooled_shape()))
            rows.append((name, layer.out_shape))
        return rows

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise ValueError("parameter names do not match model")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    # -- execution -------------------------------------------------------------

    def check_input(self, x: np.ndarray) -> None:
        want = self.input_shape
        got = tuple(x.shape[1:])
        # the time axis may vary: both architectures aggregate over it
        if len(got) != len(want) or got[1:] != want[1:]:
            raise ValueError(f"input shape mismatch: expected (batch, *, {', '.join(map(str, want[1:]))}),"
                             f" got {tuple(x.shape)}")

    def run_layers(self, x: Tensor, stop: Optional[int] = None) -> list[Tensor]:
        """Activations of layers ``0..stop-1`` (all layers when ``stop`` is None)."""
        outs = []
        for layer in self.layers[:stop]:
            x = layer(x)
            outs.append(x)
        return outs

    def forward(self, x, record: bool = False) -> ForwardResult:
        x = np.asarray(x, dtype=np.float64)
        self.check_input(x)
        if not record:
            with no_record():
                outs = self.run_layers(Tensor(x))
            return ForwardResult(outs[self.embedding_index], outs[-2], outs[-1])
        tape = Tape()
        tape.params = self.parameters()
        with tape:
            outs = self.run_layers(Tensor(x))
        return ForwardResult(outs[self.embedding_index], outs[-2], outs[-1], tape)

    def predict(self, x: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """(embeddings, probabilities) for a stacked input array, no tape."""
        embs, probs = [], []
        for i in range(0, len(x), batch_size):
            r = self.forward(x[i:i + batch_size])
            embs.append(r.embedding.data)
            probs.append(r.probabilities.data)
        return np.concatenate(embs), np.concatenate(probs)


def forward(model: Model, x, record: bool = False) -> ForwardResult:
    return model.forward(x, record=record)


def backward(tape: Optional[Tape], loss: Tensor, grad=None) -> dict[str, np.ndarray]:
    """Propagate ``loss`` (scalar, or with an explicit upstream ``grad``)
    back through ``tape``; returns one gradient per model parameter."""
    if tape is None:
        raise TapeError("backward requires a tape recorded with record=True")
    tape.backward([(loss, 1.0 if grad is None else grad)])
    return {name: tape.grad(p) for name, p in tape.params.items()}


# -- builders -----------------------------------------------------------------


def _merge(defaults: dict, overrides: Optional[dict]) -> dict:
    cfg = dict(defaults)
    for k, v in (overrides or {}).items():
        if k not in cfg:
            raise ArchitectureError(f"unknown architecture option {k!r}")
        cfg[k] = tuple(v) if isinstance(v, list) else v
    return cfg


def waveform_specs(cfg: dict) -> list[LayerSpec]:
    act = cfg["activation"]
    specs = [LayerSpec("conv1d", channels=cfg["conv_channels"], kernel=cfg["conv_kernel"],
                       stride=cfg["conv_stride"], padding="valid", activation=act, name="Conv1")]
    for i, ch in enumerate(cfg["res_channels"], 1):
        specs.append(LayerSpec("resblock1d", channels=ch, kernel=cfg["res_kernel"],
                               pool=cfg["res_pool"], activation=act, name=f"Res{i}"))
    specs += [
        LayerSpec("global_max_pool", name="GlobalPool"),
        LayerSpec("dense", units=cfg["embedding_dim"], activation=act, name="Dense1"),
        LayerSpec("dense", units=cfg["n_classes"], name="Output"),
        LayerSpec("softmax", name="Softmax"),
    ]
    return specs


def _spectrogram_trunk(cfg: dict) -> list[LayerSpec]:
    act = cfg["activation"]
    k = cfg["conv_kernel"]
    specs = [LayerSpec("conv2d", channels=cfg["conv_channels"], kernel=(k, k), stride=(1, 1),
                       padding="same", activation=act, name="Conv1")]
    if len(cfg["res_channels"]) != len(cfg["res_strides"]):
        raise ArchitectureError("res_channels and res_strides must have equal length")
    for i, (ch, s) in enumerate(zip(cfg["res_channels"], cfg["res_strides"]), 1):
        specs.append(LayerSpec("resblock2d", channels=ch, kernel=(3, 3), stride=(s, s),
                               activation=act, name=f"Res{i}"))
    return specs


def _trunk_width(cfg: dict) -> int:
    w = cfg["input_shape"][1]
    for s in cfg["res_strides"]:
        if s < 1:
            raise ArchitectureError(f"stride must be >= 1, got {s}")
        w = -(-w // s)
    return w


def spectrogram_specs(cfg: dict, head: str = "gru") -> list[LayerSpec]:
    """``head='gru'`` gives the full CNN-GRU; ``head='pool'`` the temporary
    global-max-pool head used by the first stage of multi-step training."""
    act = cfg["activation"]
    width = cfg["pool_width"] or _trunk_width(cfg)
    specs = _spectrogram_trunk(cfg)
    specs.append(LayerSpec("concat_pools", pool=(1, width), name="Concat"))
    if head == "gru":
        specs.append(LayerSpec("gru", units=cfg["gru_units"], name="GRU"))
    elif head == "pool":
        specs.append(LayerSpec("global_max_pool", name="GlobalPool"))
    else:
        raise ValueError(f"unknown head {head!r}")
    specs += [
        LayerSpec("dense", units=cfg["embedding_dim"], activation=act, name="Dense1"),
        LayerSpec("dense", units=cfg["n_classes"], name="Output"),
        LayerSpec("softmax", name="Softmax"),
    ]
    return specs


def trunk_size(specs: list[LayerSpec]) -> int:
    """Number of leading layers up to and including the pooled concat."""
    for i, s in enumerate(specs):
        if s.kind == "concat_pools":
            return i + 1
    raise ValueError("model has no pooled convolutional trunk")


def build_waveform_model(scale: str = "desk", overrides: Optional[dict] = None,
                         seed: int = 0) -> Model:
    if scale not in WAVEFORM_CONFIGS:
        raise ValueError(f"scale must be 'paper' or 'desk', got {scale!r}")
    cfg = _merge(WAVEFORM_CONFIGS[scale], overrides)
    return Model(waveform_specs(cfg), cfg["input_shape"], seed=seed, arch="waveform",
                 scale=scale, config=cfg)


def build_spectrogram_model(scale: str = "desk", overrides: Optional[dict] = None,
                            seed: int = 0, head: str = "gru") -> Model:
    if scale not in SPECTROGRAM_CONFIGS:
        raise ValueError(f"scale must be 'paper' or 'desk', got {scale!r}")
    cfg = _merge(SPECTROGRAM_CONFIGS[scale], overrides)
    return Model(spectrogram_specs(cfg, head), cfg["input_shape"], seed=seed,
                 arch="spectrogram" if head == "gru" else "spectrogram_cnn",
                 scale=scale, config=cfg)


def build_model(arch: str, scale: str = "desk", overrides: Optional[dict] = None,
                seed: int = 0) -> Model:
    if arch == "waveform":
        return build_waveform_model(scale, overrides, seed)
    if arch == "spectrogram":
        return build_spectrogram_model(scale, overrides, seed)
    if arch == "spectrogram_cnn":
        return build_spectrogram_model(scale, overrides, seed, head="pool")
    raise ValueError(f"unknown architecture {arch!r}")
