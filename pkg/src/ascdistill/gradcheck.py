"""Central finite-difference checks for every layer kind and every loss.

Each check builds a small random problem, computes analytic gradients with
the tape, and compares them against ``(f(x + h) - f(x - h)) / 2h`` on a
sample of coordinates of every differentiable input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import distill
from .nnet import tensor as T
from .nnet.layers import LayerSpec, make_layer
from .nnet.model import build_spectrogram_model, build_waveform_model
from .nnet.tensor import Tape, Tensor

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < TOLERANCE)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def check_gradients(fn: Callable[[dict], Tensor], inputs: dict[str, Tensor], h: float = STEP,
                    max_coords: Optional[int] = 40, seed: int = 0,
                    flip_sign: bool = False, skip_kinks: bool = False) -> tuple[float, int]:
    """Compare tape gradients of scalar ``fn(inputs)`` with central differences.

    Only inputs with ``requires_grad`` are perturbed; at most ``max_coords``
    coordinates per input are sampled. With ``skip_kinks``, coordinates whose
    forward and backward one-sided slopes disagree (a ReLU or max-pool switch
    inside the +-h interval) are left out of the comparison.
    """
    with Tape() as tape:
        out = fn(inputs)
    tape.backward([(out, 1.0)])
    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for name, t in inputs.items():
        if not t.requires_grad:
            continue
        g = tape.grad(t)
        if flip_sign:
            g = -g
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(len(idx))
        smooth = np.ones(len(idx), dtype=bool)
        f0 = fn(inputs).item() if skip_kinks else 0.0
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(inputs).item()
            flat[i] = orig - h
            fm = fn(inputs).item()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * h)
            if skip_kinks:
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                smooth[j] = abs(fwd - bwd) <= TOLERANCE * max(abs(fwd), abs(bwd), 1e-4)
        worst = max(worst, relative_error(g.reshape(-1)[idx][smooth], num[smooth]))
        count += int(smooth.sum())
    return worst, count


def _weighted_sum(y: Tensor, rng: np.random.Generator) -> Callable:
    w = Tensor(rng.standard_normal(y.shape))
    return lambda out: T.sum_all(T.mul(out, w))


def _spread(rng: np.random.Generator, shape: tuple, gap: float = 0.05) -> np.ndarray:
    """Random values whose pairwise gaps exceed ``gap``, so max-pools never tie."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape) + rng.uniform(0, gap / 4, shape)


def _layer_check(spec: LayerSpec, in_shape: tuple, batch: int, seed: int,
                 x_data: Optional[np.ndarray] = None, flip: bool = False) -> tuple[float, int]:
    rng = np.random.default_rng(seed)
    layer = make_layer(spec, in_shape)
    layer.init(rng)
    for p in layer.params.values():
        p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
    x = Tensor(x_data if x_data is not None else rng.standard_normal((batch, *in_shape)),
               requires_grad=True)
    y0 = layer(x)
    reduce = _weighted_sum(y0, rng)
    inputs = {"x": x, **layer.params}

    def fn(inp):
        return reduce(layer(inp["x"]))

    return check_gradients(fn, inputs, seed=seed, flip_sign=flip)


def _check_leaky_relu(seed, flip):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 7))
    x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep away from the kink
    xt = Tensor(x, requires_grad=True)
    reduce = _weighted_sum(xt, rng)
    return check_gradients(lambda i: reduce(T.leaky_relu(i["x"], 0.3)), {"x": xt}, flip_sign=flip)


def _check_softmax(seed, flip):
    return _layer_check(LayerSpec("softmax"), (6,), 3, seed, flip=flip)


def _checks_layers() -> dict[str, Callable]:
    def spread_input(shape):
        return lambda seed: _spread(np.random.default_rng(seed + 1), shape)

    return {
        "conv1d": lambda s, f: _layer_check(
            LayerSpec("conv1d", channels=3, kernel=4, stride=2, activation="tanh"), (13, 2), 2, s, flip=f),
        "conv1d_same": lambda s, f: _layer_check(
            LayerSpec("conv1d", channels=3, kernel=3, stride=1, padding="same"), (9, 2), 2, s, flip=f),
        "conv2d": lambda s, f: _layer_check(
            LayerSpec("conv2d", channels=3, kernel=(3, 3), stride=(2, 2), padding="same",
                      activation="tanh"), (7, 6, 2), 2, s, flip=f),
        "resblock1d": lambda s, f: _layer_check(
            LayerSpec("resblock1d", channels=4, kernel=3, pool=3, activation="tanh"), (12, 2), 2, s,
            x_data=spread_input((2, 12, 2))(s), flip=f),
        "resblock2d": lambda s, f: _layer_check(
            LayerSpec("resblock2d", channels=4, kernel=(3, 3), stride=(3, 3), activation="tanh"),
            (7, 8, 2), 2, s, flip=f),
        "max_pool": lambda s, f: _layer_check(
            LayerSpec("max_pool", pool=(2, 3)), (4, 6, 2), 2, s, x_data=spread_input((2, 4, 6, 2))(s), flip=f),
        "avg_pool": lambda s, f: _layer_check(LayerSpec("avg_pool", pool=(2, 3)), (4, 7, 2), 2, s, flip=f),
        "global_max_pool": lambda s, f: _layer_check(
            LayerSpec("global_max_pool"), (5, 3), 2, s, x_data=spread_input((2, 5, 3))(s), flip=f),
        "concat_pools": lambda s, f: _layer_check(
            LayerSpec("concat_pools", pool=(1, 4)), (3, 4, 2), 2, s, x_data=spread_input((2, 3, 4, 2))(s), flip=f),
        "gru": lambda s, f: _layer_check(LayerSpec("gru", units=2), (3, 2), 2, s, flip=f),
        "dense": lambda s, f: _layer_check(LayerSpec("dense", units=4, activation="tanh"), (5,), 3, s, flip=f),
        "leaky_relu": _check_leaky_relu,
        "softmax": _check_softmax,
    }


def _loss_check(kind: str, seed: int, flip: bool) -> tuple[float, int]:
    rng = np.random.default_rng(seed)
    k, d, b = 5, 6, 3
    logits = Tensor(rng.standard_normal((b, k)), requires_grad=True)
    emb = Tensor(rng.standard_normal((b, d)), requires_grad=True)
    teacher = distill.soften(rng.standard_normal((b, k)), 2.0, "logit")
    t_emb = rng.standard_normal((b, d))
    labels = rng.integers(0, k, b)
    onehot = np.eye(k)[labels]

    def fn(inp):
        p = T.softmax(inp["z"])
        if kind == "hard_ce":
            return distill.hard_label_loss(labels, p)
        if kind == "soft_ce":
            return distill.ts_output_loss(teacher, p)
        if kind == "embedding_mse":
            return distill.embedding_loss(t_emb, inp["e"])
        cfg = distill.DistillConfig(point="both", loss_weights=(0.5, 0.5, 0.25))
        return distill.student_loss((p, inp["e"]), (teacher, t_emb, onehot), cfg)

    return check_gradients(fn, {"z": logits, "e": emb}, seed=seed, flip_sign=flip)


def _end_to_end(arch: str, seed: int, flip: bool) -> tuple[float, int]:
    rng = np.random.default_rng(seed)
    if arch == "waveform":
        model = build_waveform_model("desk", {"input_shape": (240, 2), "conv_channels": 4,
                                              "res_channels": (4, 4), "embedding_dim": 8,
                                              "n_classes": 4, "activation": "tanh"}, seed=seed)
        x = rng.uniform(-0.9, 0.9, (2, 240, 2))
    else:
        model = build_spectrogram_model("desk", {"input_shape": (6, 8, 2), "conv_channels": 3,
                                                 "conv_kernel": 3, "res_channels": (3, 4),
                                                 "res_strides": (1, 2), "embedding_dim": 8,
                                                 "n_classes": 4, "activation": "tanh"}, seed=seed)
        x = rng.standard_normal((2, 6, 8, 2))
    t_emb = rng.standard_normal((2, model.embedding_dim))
    teacher = distill.soften(rng.dirichlet(np.ones(model.n_classes), 2), 5.0, "probability")
    cfg = distill.DistillConfig(point="both")
    params = model.parameters()
    xt = Tensor(x)

    def fn(_):
        outs = model.run_layers(xt)
        return distill.student_loss((outs[-1], outs[model.embedding_index]), (teacher, t_emb, None), cfg)

    return check_gradients(fn, params, max_coords=6, seed=seed, flip_sign=flip)


def _desk_model(arch: str, seed: int, flip: bool) -> tuple[float, int]:
    """Full desk-scale architecture with its default piecewise-linear activations."""
    rng = np.random.default_rng(seed)
    if arch == "waveform":
        model = build_waveform_model("desk", seed=seed)
        x = rng.uniform(-0.9, 0.9, (2, 3999, 2))
    else:
        model = build_spectrogram_model("desk", seed=seed)
        x = rng.standard_normal((2, 25, 32, 2))
    teacher = distill.soften(rng.dirichlet(np.ones(model.n_classes), 2), 5.0, "probability")
    t_emb = rng.standard_normal((2, model.embedding_dim))
    cfg = distill.DistillConfig(point="both")
    xt = Tensor(x)

    def fn(_):
        outs = model.run_layers(xt)
        return distill.student_loss((outs[-1], outs[model.embedding_index]), (teacher, t_emb, None), cfg)

    return check_gradients(fn, model.parameters(), max_coords=4, seed=seed, flip_sign=flip,
                           skip_kinks=True)


def registry() -> dict[str, Callable]:
    checks = dict(_checks_layers())
    for kind in ("hard_ce", "soft_ce", "embedding_mse", "student_combined"):
        checks[f"loss:{kind}"] = (lambda kk: lambda s, f: _loss_check(kk, s, f))(kind)
    checks["model:waveform"] = lambda s, f: _end_to_end("waveform", s, f)
    checks["model:spectrogram"] = lambda s, f: _end_to_end("spectrogram", s, f)
    checks["model:waveform_desk"] = lambda s, f: _desk_model("waveform", s, f)
    checks["model:spectrogram_desk"] = lambda s, f: _desk_model("spectrogram", s, f)
    return checks


def run_suite(only: Optional[list[str]] = None, seed: int = 0,
              inject_fault: Optional[str] = None) -> list[CheckResult]:
    """Run all (or the ``only``-matching) checks.

    ``inject_fault`` negates the analytic gradient of the named check; it
    exists to prove a wrong gradient is caught.
    """
    checks = registry()
    if only:
        unknown = [o for o in only if not any(o == n or n.startswith(o + ":") or n.split(":")[-1] == o
                                              for n in checks)]
        if unknown:
            raise KeyError(f"unknown gradient checks: {unknown}; available: {sorted(checks)}")
        checks = {n: c for n, c in checks.items()
                  if any(o == n or n.startswith(o + ":") or n.split(":")[-1] == o for o in only)}
    results = []
    for name, check in checks.items():
        err, count = check(seed, name == inject_fault)
        results.append(CheckResult(name, err, count))
    return results
