import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ascdistill.nnet import (AdamState, ArchitectureError, LayerSpec, Tape, TapeError, Tensor,
                             adam_step, backward, build_model, build_spectrogram_model,
                             build_waveform_model, forward)
from ascdistill.nnet import checkpoint
from ascdistill.nnet import tensor as T
from ascdistill.nnet.layers import make_layer
from ascdistill.nnet.model import Model
from ascdistill.nnet.optim import adam_update

TABLE2 = [
    ("Conv1", (39999, 64)), ("Res1", (13333, 64)), ("Res2", (4444, 128)), ("Res3", (1481, 128)),
    ("Res4", (493, 128)), ("Res5", (164, 128)), ("Res6", (54, 128)), ("Res7", (18, 128)),
    ("GlobalPool", (128,)), ("Dense1", (64,)), ("Output", (10,)),
]

# Res4 carries 240 channels so that the pooled rows (21 x 1 x 240) are reachable
TABLE3 = [
    ("Conv1", (249, 256, 30)), ("Res1", (249, 256, 30)), ("Res2", (125, 128, 60)),
    ("Res3", (63, 64, 120)), ("Res4", (21, 22, 240)), ("AvgPool", (21, 1, 240)),
    ("MaxPool", (21, 1, 240)), ("Concat", (21, 480)), ("GRU", (480,)), ("Dense1", (64,)),
    ("Output", (10,)),
]


def test_paper_waveform_shapes_match_table2():
    t0 = time.perf_counter()
    m = build_waveform_model("paper")
    assert m.shape_table() == TABLE2
    assert m.input_shape == (479999, 2)
    assert time.perf_counter() - t0 < 10


def test_paper_spectrogram_shapes_match_table3():
    m = build_spectrogram_model("paper")
    assert m.shape_table() == TABLE3
    assert m.input_shape == (249, 256, 2)


def test_paper_kernel_and_stride_columns():
    w = build_waveform_model("paper")
    assert (w.specs[0].kernel, w.specs[0].stride) == ((12,), (12,))
    assert all(s.kernel == (3,) for s in w.specs[1:8])
    s = build_spectrogram_model("paper")
    assert s.specs[0].kernel == (7, 7)
    assert [sp.stride for sp in s.specs[1:5]] == [(1, 1), (2, 2), (2, 2), (3, 3)]
    assert s.specs[5].pool == (1, 22)


def _chain(model, input_shape):
    shape = tuple(input_shape)
    for spec in model.specs:
        layer = make_layer(spec, shape)
        shape = layer.out_shape
    return shape


def test_doubled_time_axis_keeps_gru_width():
    m = build_spectrogram_model("paper")
    specs_shapes = []
    shape = (498, 256, 2)
    for spec in m.specs:
        shape = make_layer(spec, shape).out_shape
        specs_shapes.append((spec.name, shape))
    assert dict(specs_shapes)["GRU"] == (480,)
    assert dict(specs_shapes)["Concat"] == (42, 480)


def test_desk_models_run_forward():
    rng = np.random.default_rng(0)
    w = build_waveform_model("desk")
    r = w.forward(rng.normal(size=(3, 3999, 2)))
    assert r.embedding.shape == (3, 64) and r.probabilities.shape == (3, 10)
    s = build_spectrogram_model("desk")
    r = s.forward(rng.normal(size=(2, 25, 32, 2)))
    assert r.embedding.shape == (2, 64) and r.logits.shape == (2, 10)


def test_waveform_is_length_agnostic():
    w = build_waveform_model("desk")
    rng = np.random.default_rng(1)
    for n in (3999, 5000, 8000):
        assert w.forward(rng.normal(size=(1, n, 2))).embedding.shape == (1, 64)


def test_invalid_overrides():
    with pytest.raises(ArchitectureError):
        build_waveform_model("desk", {"conv_stride": 0})
    with pytest.raises(ArchitectureError):
        build_spectrogram_model("desk", {"res_strides": (1, 0, 2, 3)})
    with pytest.raises(ArchitectureError):
        build_waveform_model("desk", {"no_such_option": 1})


def test_incomposable_architecture_names_layer():
    with pytest.raises(ArchitectureError, match=r"incomposable architecture at layer \d+ \(resblock1d\)"):
        build_waveform_model("desk", {"input_shape": (40, 2)})


def test_layer_spec_validation():
    with pytest.raises(ArchitectureError):
        LayerSpec("conv9d", channels=3)
    with pytest.raises(ArchitectureError):
        LayerSpec("conv1d", channels=0, kernel=3)
    with pytest.raises(ArchitectureError):
        LayerSpec("conv1d", channels=4, kernel=3, stride=0)
    spec = LayerSpec("resblock2d", channels=4, kernel=(3, 3), stride=(2, 2))
    assert LayerSpec.from_dict(spec.to_dict()) == spec


def test_probabilities_on_simplex_and_deterministic():
    m = build_spectrogram_model("desk", seed=0)
    x = np.random.default_rng(2).normal(size=(4, 25, 32, 2)) * 3
    a, b = m.forward(x), m.forward(x)
    p = a.probabilities.data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(p, b.probabilities.data)
    np.testing.assert_array_equal(a.embedding.data, build_spectrogram_model("desk", seed=0).forward(x)
                                  .embedding.data)


def test_zero_output_layer_gives_uniform():
    m = build_waveform_model("desk")
    out = m.layers[-2]
    for p in out.params.values():
        p.data[...] = 0.0
    r = m.forward(np.random.default_rng(3).normal(size=(2, 3999, 2)))
    np.testing.assert_allclose(r.probabilities.data, 0.1, atol=1e-15)


def test_embedding_is_last_hidden_dense():
    m = build_waveform_model("desk")
    assert m.specs[m.embedding_index].name == "Dense1"
    assert m.specs[m.embedding_index + 1].name == "Output"


def test_dense_gradient_is_input():
    x = np.array([[1.0, -2.0, 3.0]])
    w = Tensor(np.random.default_rng(4).normal(size=(3, 2)), requires_grad=True)
    with Tape() as tape:
        y = T.matmul(Tensor(x), w)
        loss = T.sum_all(y)
    tape.backward([(loss, 1.0)])
    np.testing.assert_array_equal(tape.grad(w), np.repeat(x.T, 2, axis=1))


def test_backward_requires_tape_and_is_single_use():
    m = build_waveform_model("desk")
    x = np.random.default_rng(5).normal(size=(2, 3999, 2))
    r = m.forward(x)
    assert r.tape is None
    with pytest.raises(TapeError):
        backward(r.tape, T.sum_all(r.probabilities))
    r = m.forward(x, record=True)
    grads = backward(r.tape, T.sum_all(r.logits))
    assert set(grads) == set(m.parameters())
    assert all(grads[k].shape == p.shape for k, p in m.parameters().items())
    with pytest.raises(TapeError):
        backward(r.tape, T.sum_all(r.logits))


def test_loss_after_forward_is_recorded():
    m = build_spectrogram_model("desk")
    r = m.forward(np.random.default_rng(6).normal(size=(2, 25, 32, 2)), record=True)
    loss = T.mean_all(T.mul(r.embedding, r.embedding))
    grads = backward(r.tape, loss)
    assert np.abs(grads["00.Conv1.w"]).max() > 0


def test_no_record_forward_inside_tape():
    m = build_waveform_model("desk")
    with Tape() as tape:
        r = m.forward(np.random.default_rng(7).normal(size=(1, 3999, 2)))
    assert not tape.nodes and not r.probabilities.requires_grad


def test_resblock_zero_weights_is_pooled_identity():
    layer = make_layer(LayerSpec("resblock1d", channels=4, kernel=3, pool=3), (12, 4))
    layer.init(np.random.default_rng(0))
    for name in ("conv_a.w", "conv_b.w"):
        layer.params[name].data[...] = 0.0
    x = np.random.default_rng(8).normal(size=(2, 12, 4))
    y = layer(Tensor(x)).data
    np.testing.assert_array_equal(y, x.reshape(2, 4, 3, 4).max(axis=2))
    layer2 = make_layer(LayerSpec("resblock2d", channels=3, kernel=(3, 3), stride=(1, 1)), (5, 6, 3))
    layer2.init(np.random.default_rng(0))
    for name in ("conv_a.w", "conv_b.w"):
        layer2.params[name].data[...] = 0.0
    x = np.random.default_rng(9).normal(size=(1, 5, 6, 3))
    np.testing.assert_array_equal(layer2(Tensor(x)).data, x)


def test_same_padding_ceil_rule():
    assert T.same_padding(64, 3, 3) == (1, 1)  # (22 - 1) * 3 + 3 - 64 = 2
    assert -(-64 // 3) == 22


# -- independent shape oracle ---------------------------------------------------


def waveform_oracle(cfg):
    n = (cfg["input_shape"][0] - cfg["conv_kernel"]) // cfg["conv_stride"] + 1
    shapes = [(n, cfg["conv_channels"])]
    for ch in cfg["res_channels"]:
        n //= cfg["res_pool"]
        shapes.append((n, ch))
    return shapes + [(cfg["res_channels"][-1],), (cfg["embedding_dim"],), (cfg["n_classes"],)]


def spectrogram_oracle(cfg):
    h, w = cfg["input_shape"][:2]
    shapes = [(h, w, cfg["conv_channels"])]
    for ch, s in zip(cfg["res_channels"], cfg["res_strides"]):
        h, w = -(-h // s), -(-w // s)
        shapes.append((h, w, ch))
    c = cfg["res_channels"][-1]
    shapes += [(h, 1, c), (h, 1, c), (h, 2 * c), (2 * c,), (cfg["embedding_dim"],), (cfg["n_classes"],)]
    return shapes


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_waveform_shape_chain_matches_oracle(data):
    n_res = data.draw(st.integers(1, 4))
    pool = data.draw(st.integers(2, 3))
    stride = data.draw(st.integers(1, 12))
    kernel = data.draw(st.integers(stride, 16))
    min_len = kernel + stride * (pool ** n_res - 1)
    cfg = {
        "input_shape": (data.draw(st.integers(min_len, min_len + 500)), 2),
        "conv_channels": data.draw(st.integers(1, 8)), "conv_kernel": kernel, "conv_stride": stride,
        "res_channels": tuple(data.draw(st.lists(st.integers(1, 8), min_size=n_res, max_size=n_res))),
        "res_pool": pool, "embedding_dim": data.draw(st.integers(1, 16)),
        "n_classes": data.draw(st.integers(2, 12)),
    }
    m = build_waveform_model("desk", cfg)
    assert [s for _, s in m.shape_table()] == waveform_oracle(cfg)


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_spectrogram_shape_chain_matches_oracle(data):
    n_res = data.draw(st.integers(1, 4))
    strides = tuple(data.draw(st.lists(st.integers(1, 3), min_size=n_res, max_size=n_res)))
    cfg = {
        "input_shape": (data.draw(st.integers(3, 40)), data.draw(st.integers(3, 40)), 2),
        "conv_channels": data.draw(st.integers(1, 6)),
        "conv_kernel": data.draw(st.sampled_from([1, 3, 5, 7])),
        "res_channels": tuple(data.draw(st.lists(st.integers(1, 6), min_size=n_res, max_size=n_res))),
        "res_strides": strides, "embedding_dim": data.draw(st.integers(1, 16)),
        "n_classes": data.draw(st.integers(2, 12)),
    }
    m = build_spectrogram_model("desk", cfg)
    assert [s for _, s in m.shape_table()] == spectrogram_oracle(cfg)


# -- Adam ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters():
    m = build_waveform_model("desk")
    before = m.state()
    adam_step(m, {k: np.zeros_like(v.data) for k, v in m.parameters().items()}, AdamState())
    for k, v in m.parameters().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_adam_first_step():
    p = {"p": Tensor(np.array(0.0), requires_grad=True)}
    adam_update(p, {"p": np.array(1.0)}, AdamState())
    assert p["p"].data == pytest.approx(-0.001, rel=1e-6)


def test_adam_converges_on_quadratic():
    rng = np.random.default_rng(10)
    a = np.diag(rng.uniform(0.5, 2.0, 5))
    p = {"x": Tensor(rng.normal(size=5) * 3, requires_grad=True)}
    loss = lambda x: 0.5 * x @ a @ x
    initial = loss(p["x"].data)
    state = AdamState()
    for _ in range(500):
        adam_update(p, {"x": a @ p["x"].data}, state, lr=0.05)
    assert loss(p["x"].data) < 1e-3 * initial


def test_adam_rejects_mismatched_gradients():
    m = build_waveform_model("desk")
    with pytest.raises((KeyError, ValueError)):
        adam_step(m, {"nope": np.zeros(3)}, AdamState())


# -- checkpoints ---------------------------------------------------------------------


@pytest.mark.parametrize("arch", ["waveform", "spectrogram", "spectrogram_cnn"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, arch):
    m = build_model(arch, "desk", seed=3)
    for p in m.parameters().values():
        p.data += np.random.default_rng(11).normal(size=p.shape) * 1e-3
    path = tmp_path / "m.ckpt"
    checkpoint.save(m, path)
    back, _ = checkpoint.load(path)
    assert back.checksum() == m.checksum()
    assert back.arch == m.arch and back.specs == m.specs
    for k, p in m.parameters().items():
        assert back.parameters()[k].data.tobytes() == p.data.tobytes()


def test_checkpoint_corruption_names_file(tmp_path):
    m = build_waveform_model("desk")
    path = tmp_path / "bad.ckpt"
    checkpoint.save(m, path)
    raw = bytearray(path.read_bytes())
    path.write_bytes(bytes(raw[:-16]))
    with pytest.raises(checkpoint.CheckpointError, match="bad.ckpt"):
        checkpoint.load(path)
    path.write_bytes(b"garbage")
    with pytest.raises(checkpoint.CheckpointError, match="corrupted checkpoint"):
        checkpoint.load(path)


def test_model_copy_is_independent():
    m = build_waveform_model("desk")
    c = m.copy()
    next(iter(c.parameters().values())).data += 1.0
    assert c.checksum() != m.checksum()


def test_forward_module_function():
    m = build_waveform_model("desk")
    x = np.random.default_rng(12).normal(size=(1, 3999, 2))
    np.testing.assert_array_equal(forward(m, x).logits.data, m.forward(x).logits.data)
    with pytest.raises(ValueError, match="input shape mismatch"):
        m.forward(np.zeros((1, 3999, 3)))


def test_model_requires_dense_softmax_tail():
    with pytest.raises(ArchitectureError):
        Model([LayerSpec("global_max_pool"), LayerSpec("dense", units=3)], (10, 2))
