import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weakstrong.errors import ConfigError, DimensionError, ParameterError
from weakstrong.model import (
    ModelConfig,
    ModelParams,
    backward,
    cross_entropy,
    forward,
    grad_check,
    grad_check_report,
    init_params,
    load_checkpoint,
    param_shapes,
    params_from_dict,
    params_to_dict,
    save_checkpoint,
)
from weakstrong.numerics import Rng, softmax
from weakstrong.verify import ARCHITECTURES, GRAD_TOL

from conftest import assert_params_equal


def zero_params(cfg):
    return ModelParams(cfg, {k: np.zeros(s) for k, s in param_shapes(cfg).items()})


def test_config_validation():
    with pytest.raises(ConfigError, match="model.input_dim"):
        ModelConfig(input_dim=0)
    with pytest.raises(ConfigError, match="model.hidden_dims"):
        ModelConfig(input_dim=2, hidden_dims=(3, 0))
    with pytest.raises(ConfigError, match="model.num_classes"):
        ModelConfig(input_dim=2, num_classes=1)


def test_param_shapes_and_init():
    cfg = ModelConfig(input_dim=3, hidden_dims=(5, 4), domain_head=True)
    shapes = param_shapes(cfg)
    assert shapes["hidden.0.weight"] == (3, 5)
    assert shapes["head.weight"] == (4, 2)
    assert shapes["domain.weight"] == (4, 2)
    params = init_params(cfg, Rng(0))
    assert all(not params[k].any() for k in params.tensors if k.endswith(".bias"))
    big = init_params(ModelConfig(input_dim=400, hidden_dims=(300,)), Rng(1))
    assert abs(big["hidden.0.weight"].std() - math.sqrt(2 / 400)) < 0.002
    with pytest.raises(DimensionError):
        ModelParams(cfg, {"head.weight": np.zeros((4, 2))})


def test_forward_examples():
    cfg = ModelConfig(input_dim=3, hidden_dims=(4,), num_classes=3)
    probs = forward(zero_params(cfg), np.random.default_rng(0).normal(size=(5, 3))).probs
    np.testing.assert_allclose(probs, np.full((5, 3), 1 / 3), atol=1e-15)
    with pytest.raises(DimensionError):
        forward(zero_params(cfg), np.zeros((2, 4)))


def test_cross_entropy_examples():
    loss, _ = cross_entropy(np.array([[0.25, 0.75]]), [1], [1.0])
    assert abs(loss - 0.287682072451781) < 1e-12
    probs = softmax(np.random.default_rng(1).normal(size=(4, 3)))
    loss, d = cross_entropy(probs, [0, 1, 2, 0], np.zeros(4))
    assert loss == 0.0 and not d.any()
    probs = np.array([[0.1, 0.9], [0.6, 0.4], [0.3, 0.7]])
    labels, w = [1, 0, 1], [1.0, 0.5, 0.0]
    loss, d = cross_entropy(probs, labels, w)
    assert abs(loss - (-math.log(0.9) - 0.5 * math.log(0.6)) / 3) < 1e-15
    np.testing.assert_allclose(d[0], [0.1 / 3, -0.1 / 3])
    np.testing.assert_allclose(d[1], [0.5 * -0.4 / 3, 0.5 * 0.4 / 3])
    assert not d[2].any()


def test_cross_entropy_errors():
    probs = np.array([[0.5, 0.5]])
    with pytest.raises(ParameterError):
        cross_entropy(probs, [2])
    with pytest.raises(ParameterError):
        cross_entropy(probs, [0], [1.5])
    with pytest.raises(DimensionError):
        cross_entropy(probs, [0, 1])


def test_backward_examples():
    cfg = ModelConfig(input_dim=3, hidden_dims=(4, 2))
    params = init_params(cfg, Rng(2))
    x = np.random.default_rng(2).normal(size=(6, 3))
    trace = forward(params, x)
    grads = backward(trace, params, np.zeros((6, 2)))
    assert all(not g.any() for g in grads.values())
    linear = ModelConfig(input_dim=3, hidden_dims=())
    p = init_params(linear, Rng(3))
    x1 = np.array([[0.5, -1.0, 2.0]])
    d = np.array([[0.3, -0.3]])
    np.testing.assert_array_equal(backward(forward(p, x1), p, d)["head.weight"], x1.T @ d)
    with pytest.raises(DimensionError):
        backward(trace, params, np.zeros((6, 3)))


def test_backward_dead_units_on_zero_input():
    cfg = ModelConfig(input_dim=3, hidden_dims=(4,))
    params = init_params(cfg, Rng(4))
    trace = forward(params, np.zeros((3, 3)))
    _, d = cross_entropy(trace.probs, [0, 1, 0])
    grads = backward(trace, params, d)
    assert not grads["hidden.0.weight"].any()  # inputs are zero, so x^T dz vanishes
    inactive = trace.pre[0][0] <= 0
    assert not grads["hidden.0.bias"][inactive].any()


@pytest.mark.parametrize("cfg", ARCHITECTURES, ids=lambda c: f"h{c.hidden_dims}-k{c.num_classes}-d{int(c.domain_head)}")
def test_grad_check_architecture_matrix(cfg):
    assert grad_check(cfg, seed=0) < GRAD_TOL


def test_grad_check_default_config_is_deterministic():
    cfg = ModelConfig(input_dim=8)
    first = grad_check(cfg, seed=11)
    assert first < GRAD_TOL
    assert grad_check(cfg, seed=11) == first


def test_grad_check_zero_input_batch():
    report = grad_check_report(ModelConfig(input_dim=4, hidden_dims=(6,)), seed=1, x=np.zeros((4, 4)))
    assert report.max_relative_error < GRAD_TOL


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(logits):
    np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_unit_weights_equal_unweighted(seed):
    r = np.random.default_rng(seed)
    probs = softmax(r.normal(size=(5, 3)))
    labels = r.integers(0, 3, size=5)
    a = cross_entropy(probs, labels)
    b = cross_entropy(probs, labels, np.ones(5))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_backward_is_linear_in_dlogits(seed):
    cfg = ModelConfig(input_dim=3, hidden_dims=(5, 3))
    params = init_params(cfg, Rng(seed))
    r = np.random.default_rng(seed)
    trace = forward(params, r.normal(size=(4, 3)))
    d = r.normal(size=(4, 2))
    g1, g2 = backward(trace, params, d), backward(trace, params, 2 * d)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=0, atol=1e-12)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = init_params(ModelConfig(input_dim=5, hidden_dims=(7, 3), domain_head=True), Rng(9))
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert loaded.config == params.config
    assert_params_equal(loaded, params)
    with pytest.raises(ConfigError):
        params_from_dict({**params_to_dict(params), "version": 99})
