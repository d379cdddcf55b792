import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ascdistill import synthgen
from ascdistill.data import Dataset
from ascdistill.distill import (DistillConfig, SofteningMode, SoftLabelSet, choose_partners,
                                embedding_loss, extract_soft_labels, hard_label_loss, soften,
                                student_loss, teacher_outputs, ts_output_loss)
from ascdistill.features import FeatureConfig, FeatureStore
from ascdistill.nnet import build_spectrogram_model, build_waveform_model


def entropy(p):
    return -np.sum(p * np.log(np.clip(p, 1e-300, None)), axis=-1)


# -- soften ----------------------------------------------------------------------


def softmax_oracle(v, t):
    e = [math.exp(x / t) for x in v]
    return [x / sum(e) for x in e]


def test_soften_worked_example():
    out = soften([0.7, 0.2, 0.1], 5.0, "probability")
    np.testing.assert_allclose(out, softmax_oracle([0.7, 0.2, 0.1], 5.0), rtol=0, atol=1e-4)
    np.testing.assert_allclose(out, [0.3582, 0.3241, 0.3177], atol=1e-4)


def test_quoted_triple_is_off_simplex_but_ratios_agree():
    # the often-quoted (0.3668, 0.3317, 0.3252) sums to 1.0237; its ratios still encode T = 5
    quoted = np.array([0.3668, 0.3317, 0.3252])
    assert abs(quoted.sum() - 1) > 0.02
    out = soften([0.7, 0.2, 0.1], 5.0)
    np.testing.assert_allclose(quoted / quoted.sum(), out, atol=2e-4)


def test_soften_logit_identity_and_limit():
    z = np.array([1.5, -0.3, 2.2, 0.0])
    e = np.exp(z - z.max())
    np.testing.assert_allclose(soften(z, 1.0, "logit"), e / e.sum(), rtol=0, atol=1e-15)
    np.testing.assert_allclose(soften(z, 1e9, "logit"), 0.25, atol=1e-6)
    np.testing.assert_allclose(soften([0.7, 0.2, 0.1], 1e9), 1 / 3, atol=1e-6)


def test_soften_errors():
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            soften([0.5, 0.5], t)
    with pytest.raises(ValueError, match="simplex"):
        soften([2.0, -1.0], 1.0, "probability")


@pytest.mark.parametrize("mode", ["probability", "logit"])
def test_temperature_properties_over_random_vectors(mode):
    rng = np.random.default_rng(0)
    temps = [0.5, 1, 2, 5, 10, 100]
    raw = rng.normal(size=(1000, 10)) * 3
    v = soften(raw, 1.0, "logit") if mode == "probability" else raw
    outs = np.stack([soften(v, t, mode) for t in temps])
    np.testing.assert_allclose(outs.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(outs >= 0)
    assert np.all(np.diff(entropy(outs), axis=0) >= -1e-12)
    assert np.all(outs.argmax(axis=-1) == v.argmax(axis=-1))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-20, 20)), st.floats(0.05, 50), st.floats(1.01, 4))
def test_entropy_monotone_in_temperature(z, t, factor):
    low, high = soften(z, t, "logit"), soften(z, t * factor, "logit")
    assert entropy(high) >= entropy(low) - 1e-9


# -- losses -------------------------------------------------------------------------


def test_ts_output_loss_examples():
    assert ts_output_loss([0.9, 0.1], [0.6, 0.4]).item() == pytest.approx(
        -(0.9 * math.log(0.6) + 0.1 * math.log(0.4)), abs=1e-11)
    assert ts_output_loss([0.9, 0.1], [0.6, 0.4]).item() == pytest.approx(0.5514, abs=1e-4)
    assert ts_output_loss([0.5, 0.5], [0.5, 0.5]).item() == pytest.approx(math.log(2), abs=1e-11)
    assert ts_output_loss([0, 1, 0], [0.2, 0.5, 0.3]).item() == pytest.approx(-math.log(0.5), abs=1e-11)


def test_ts_output_loss_batch_average_and_errors():
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    s = np.array([[0.5, 0.5], [0.25, 0.75]])
    assert ts_output_loss(t, s).item() == pytest.approx((math.log(2) - math.log(0.75)) / 2)
    with pytest.raises(ValueError, match="dimension mismatch"):
        ts_output_loss([0.5, 0.5], [0.2, 0.3, 0.5])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-8, 8)), arrays(np.float64, 5, elements=st.floats(-8, 8)))
def test_cross_entropy_minimized_at_teacher(a, b):
    p, q = soften(a, 1.0, "logit"), soften(b, 1.0, "logit")
    assert ts_output_loss(p, q).item() >= ts_output_loss(p, p).item() - 1e-9


def test_hard_label_loss_is_one_hot_ce():
    s = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert hard_label_loss([1, 0], s).item() == pytest.approx(-(math.log(0.8) + math.log(0.6)) / 2)


def test_embedding_loss_examples():
    assert embedding_loss([1.0, 2.0], [1.0, 2.0]).item() == 0.0
    assert embedding_loss([0.0, 0.0], [3.0, 4.0]).item() == 12.5
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=64), rng.normal(size=64)
    total = 0.0
    for i in range(64):
        total += (a[i] - b[i]) ** 2
    assert embedding_loss(a, b).item() == pytest.approx(total / 64, abs=1e-12)
    with pytest.raises(ValueError, match="dimension mismatch"):
        embedding_loss(np.zeros(3), np.zeros(4))


def test_student_loss_weighting():
    t, s = np.array([0.9, 0.1]), np.array([0.6, 0.4])
    emb_t, emb_s = np.zeros(2), np.array([3.0, 4.0])
    out = DistillConfig("output")
    assert student_loss((s, emb_s), (t, None, None), out).item() == ts_output_loss(t, s).item()
    emb = DistillConfig("embedding")
    assert student_loss((s, emb_t), (None, emb_t, None), emb).item() == 0.0
    both = DistillConfig("both")
    assert both.loss_weights == (0.5, 0.5, 0.0)
    val = student_loss((s, emb_s), (t, emb_t, None), both).item()
    assert val == pytest.approx(0.5 * ts_output_loss(t, s).item() + 0.5 * 12.5)
    hard = DistillConfig("output", loss_weights=(1.0, 0.0, 1.0))
    onehot = np.array([1.0, 0.0])
    assert student_loss((s, emb_s), (t, None, onehot), hard).item() == pytest.approx(
        ts_output_loss(t, s).item() - math.log(0.6))


def test_distill_config_validation():
    with pytest.raises(ValueError):
        DistillConfig("middle")
    with pytest.raises(ValueError):
        DistillConfig("output", temperature=0)
    with pytest.raises(ValueError):
        DistillConfig("output", teacher_concat_count=0)
    with pytest.raises(ValueError, match="inactive"):
        DistillConfig("output", loss_weights=(1, 1, 0))
    with pytest.raises(ValueError):
        DistillConfig("both", loss_weights=(0, 0, 0))
    with pytest.raises(ValueError):
        DistillConfig("output", partner_resample="sometimes")
    cfg = DistillConfig("both", 5.0, "logit", 2, (0.3, 0.7, 0.0), "fixed")
    assert cfg.softening is SofteningMode.LOGIT
    assert DistillConfig.from_dict(cfg.to_dict()) == cfg


# -- soft-label extraction ----------------------------------------------------------


@pytest.fixture(scope="module")
def small_store():
    bank = synthgen.default_scene_bank(0)
    segs = synthgen.generate_corpus(bank, per_class=4, duration_s=1.0, seed=0)
    return FeatureStore(Dataset(segs, 10), FeatureConfig())


def test_partner_choice_policy():
    pool = ["a", "b", "c", "d"]
    p = choose_partners("a", pool, 2, seed=3)
    assert len(set(p)) == 2 and "a" not in p
    assert p == choose_partners("a", list(reversed(pool)), 2, seed=3)
    assert choose_partners("a", pool, 0, 3) == []


def test_partner_fallback_self_concatenation(caplog):
    with caplog.at_level("WARNING"):
        assert choose_partners("a", ["a"], 2, seed=0) == ["a", "a"]
    assert "self-concatenating" in caplog.text


def test_identity_extraction_reproduces_teacher(small_store):
    teacher = build_spectrogram_model("desk", seed=1)
    ids = small_store.dataset.ids[:12]
    cfg = DistillConfig("output", 1.0, "logit", 1)
    labels = extract_soft_labels(teacher, small_store, ids, cfg, seed=0)
    _, _, probs = teacher_outputs(teacher, small_store.singles("spectrogram", ids))
    for i, sid in enumerate(ids):
        np.testing.assert_array_equal(labels.distributions[sid], probs[i])
        assert labels.teacher_inputs[sid] == (sid,)


def test_concat_extraction_uses_longer_input(small_store, tmp_path):
    teacher = build_waveform_model("desk", seed=1)
    ids = small_store.dataset.ids[:6]
    cfg = DistillConfig("embedding", 5.0, teacher_concat_count=2)
    a = extract_soft_labels(teacher, small_store, ids, cfg, seed=4)
    b = extract_soft_labels(teacher, small_store, ids, cfg, seed=4)
    for sid in ids:
        assert len(a.teacher_inputs[sid]) == 2 and a.teacher_inputs[sid][0] == sid
        partner = a.teacher_inputs[sid][1]
        assert small_store.dataset[partner].label == small_store.dataset[sid].label
        np.testing.assert_array_equal(a.embeddings[sid], b.embeddings[sid])
        assert abs(a.distributions[sid].sum() - 1) < 1e-9
    x = small_store.batch("waveform", [a.teacher_inputs[ids[0]]])
    assert x.shape[1] == 2 * small_store.one("waveform", [ids[0]]).shape[0]
    path = tmp_path / "soft.jsonl"
    a.to_jsonl(path)
    back = SoftLabelSet.from_jsonl(path)
    assert back.provenance["teacher_checksum"] == teacher.checksum()
    for sid in ids:
        np.testing.assert_array_equal(back.distributions[sid], a.distributions[sid])
