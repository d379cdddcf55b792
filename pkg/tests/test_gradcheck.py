import numpy as np
import pytest

from ascdistill import gradcheck
from ascdistill.gradcheck import TOLERANCE, check_gradients, relative_error, run_suite
from ascdistill.nnet import Tensor
from ascdistill.nnet import tensor as T

LAYER_KINDS = ["conv1d", "conv1d_same", "conv2d", "resblock1d", "resblock2d", "max_pool", "avg_pool",
               "global_max_pool", "concat_pools", "gru", "dense", "softmax", "leaky_relu"]
LOSSES = ["loss:hard_ce", "loss:soft_ce", "loss:embedding_mse", "loss:student_combined"]


def test_registry_covers_every_layer_and_loss():
    names = set(gradcheck.registry())
    assert set(LAYER_KINDS + LOSSES) <= names


@pytest.mark.parametrize("name", LAYER_KINDS + LOSSES)
def test_check_passes(name):
    (res,) = run_suite([name], seed=0)
    assert res.n_checked > 0
    assert res.max_rel_error < TOLERANCE, res


def test_injected_fault_is_caught():
    (res,) = run_suite(["dense"], inject_fault="dense")
    assert not res.passed


def test_only_filter_by_prefix_and_unknown():
    names = [r.name for r in run_suite(["loss"])]
    assert names == LOSSES
    with pytest.raises(KeyError, match="unknown gradient checks"):
        run_suite(["nope"])


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)
    assert relative_error(np.array([2.0]), np.array([1.0])) == 0.5


def test_check_gradients_on_a_smooth_function():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    err, n = check_gradients(lambda d: T.sum_all(T.mul(T.tanh(d["x"]), d["x"])), {"x": x}, max_coords=None)
    assert n == 12 and err < 1e-7
