"""Gradient oracle and invariant tests for the autodiff tape."""

import numpy as np
import pytest

from advtiles.layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dropout,
    Flatten,
    ForwardContext,
    Linear,
    MaxPool2d,
    Reshape,
    supported_layers,
)
from advtiles.tensor import NonFiniteError, Tensor, conv2d, conv_transpose2d, max_pool2d

from gradcheck import assert_matches_fd


def test_identity_forward():
    x = Tensor([1.0, 2.0, 3.0])
    assert np.array_equal(x.data, [1.0, 2.0, 3.0])


def test_linear_identity_weights():
    rng = np.random.default_rng(0)
    layer = Linear(2, 2, rng)
    layer.weight.data = np.eye(2)
    layer.bias.data = np.zeros(2)
    out = layer.forward(Tensor([[0.5, -0.5]]), ForwardContext(False))
    assert np.allclose(out.data, [[0.5, -0.5]])


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient_analytic():
    x = Tensor([3.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, [6.0])


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_nonfinite_raises():
    x = Tensor([1.0, 0.0])
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) / x


def test_two_layer_net_matches_straight_line_reimplementation():
    # independent loop-nest forward of fc1 -> leaky relu -> fc2
    rng = np.random.default_rng(7)
    fc1, fc2 = Linear(3, 4, rng), Linear(4, 2, rng)
    x = np.array([[0.3, -1.2, 0.8], [1.5, 0.2, -0.7]])
    out = fc2.forward(
        fc1.forward(Tensor(x), ForwardContext(False)).leaky_relu(0.01), ForwardContext(False)
    ).data

    expected = np.zeros((2, 2))
    for n in range(2):
        hidden = np.zeros(4)
        for j in range(4):
            acc = fc1.bias.data[j]
            for i in range(3):
                acc += fc1.weight.data[j, i] * x[n, i]
            hidden[j] = acc if acc > 0 else 0.01 * acc
        for k in range(2):
            acc = fc2.bias.data[k]
            for j in range(4):
                acc += fc2.weight.data[k, j] * hidden[j]
            expected[n, k] = acc
    # BLAS and the scalar loop accumulate in different orders; agreement is
    # to double-precision rounding, not bit identity
    assert np.allclose(out, expected, rtol=1e-13, atol=1e-15)


def test_backward_linearity():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

    def grad_of(a, b):
        x.zero_grad()
        loss1 = ((x @ w) ** 2).sum()
        loss2 = (x @ w).tanh().sum()
        (a * loss1 + b * loss2).backward()
        return x.grad.copy()

    g1 = grad_of(1.0, 0.0)
    g2 = grad_of(0.0, 1.0)
    combined = grad_of(0.7, -2.5)
    assert np.allclose(combined, 0.7 * g1 - 2.5 * g2, rtol=1e-12, atol=1e-12)


def test_forward_backward_determinism():
    def run():
        rng = np.random.default_rng(11)
        layer = Conv2d(2, 3, 3, 2, 1, rng)
        x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
        out = layer.forward(x, ForwardContext(False))
        out.sum().backward()
        return out.data.copy(), x.grad.copy(), layer.weight.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_supported_layer_contract():
    kinds = supported_layers()
    assert set(kinds) == {
        "linear",
        "conv2d",
        "conv_transpose2d",
        "batchnorm2d",
        "max_pool2d",
        "dropout",
        "relu",
        "leaky_relu",
        "tanh",
        "sigmoid",
        "log_softmax",
        "flatten",
        "reshape",
    }
    assert "conv_transpose2d" in kinds
    assert "batchnorm2d" in kinds
    assert "attention" not in kinds


# ---------------------------------------------------------------------------
# Finite-difference oracle per layer kind
# ---------------------------------------------------------------------------


def _layer_case(kind: str, seed: int):
    """Build (callable producing the scalar loss, tensors to check) for a layer kind."""
    rng = np.random.default_rng(seed)
    eval_ctx = ForwardContext(False)

    def proj(out):
        r = np.random.default_rng(seed + 1).normal(size=out.shape)
        return (out * Tensor(r)).sum()

    if kind == "linear":
        layer = Linear(4, 3, rng)
        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        return lambda: proj(layer.forward(x, eval_ctx)), [x, layer.weight, layer.bias]
    if kind == "conv2d":
        layer = Conv2d(2, 3, 3, 2, 1, rng)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        return lambda: proj(layer.forward(x, eval_ctx)), [x, layer.weight, layer.bias]
    if kind == "conv_transpose2d":
        layer = ConvTranspose2d(3, 2, 3, 2, 1, rng, output_padding=1)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        return lambda: proj(layer.forward(x, eval_ctx)), [x, layer.weight, layer.bias]
    if kind == "batchnorm2d":
        layer = BatchNorm2d(2)
        train_ctx = ForwardContext(True)
        x = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
        return lambda: proj(layer.forward(x, train_ctx)), [x, layer.weight, layer.bias]
    if kind == "max_pool2d":
        layer = MaxPool2d(2)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        return lambda: proj(layer.forward(x, eval_ctx)), [x]
    if kind == "dropout":
        layer = Dropout(0.5)  # checked in eval mode: the stochastic mask is off
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        return lambda: proj(layer.forward(x, eval_ctx)), [x]
    if kind == "relu":
        x = Tensor(rng.normal(size=(3, 4)) + 0.1, requires_grad=True)
        return lambda: proj(x.relu()), [x]
    if kind == "leaky_relu":
        x = Tensor(rng.normal(size=(3, 4)) + 0.1, requires_grad=True)
        return lambda: proj(x.leaky_relu(0.01)), [x]
    if kind == "tanh":
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        return lambda: proj(x.tanh()), [x]
    if kind == "sigmoid":
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        return lambda: proj(x.sigmoid()), [x]
    if kind == "log_softmax":
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        return lambda: proj(x.log_softmax(1)), [x]
    if kind == "flatten":
        layer = Flatten()
        x = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        return lambda: proj(layer.forward(x, eval_ctx)), [x]
    if kind == "reshape":
        layer = Reshape((3, 2, 2))
        x = Tensor(rng.normal(size=(2, 12)), requires_grad=True)
        return lambda: proj(layer.forward(x, eval_ctx)), [x]
    raise AssertionError(f"no case for {kind}")


@pytest.mark.parametrize("kind", supported_layers())
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_gradients_match_finite_differences(kind, seed):
    f, tensors = _layer_case(kind, seed * 101 + 13)
    assert_matches_fd(f, tensors)


def test_conv_transpose_no_output_padding_gradient():
    rng = np.random.default_rng(5)
    layer = ConvTranspose2d(2, 3, 2, 2, 0, rng)
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    r = rng.normal(size=(1, 3, 6, 6))
    assert_matches_fd(
        lambda: (layer.forward(x, ForwardContext(False)) * Tensor(r)).sum(),
        [x, layer.weight, layer.bias],
    )


def test_conv_shapes_against_torch_conventions():
    # stride-2 pad-1 3x3 halves even inputs; conv transpose inverts it
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(1, 3, 8, 8)))
    y = conv2d(x, Tensor(rng.normal(size=(4, 3, 3, 3))), None, stride=2, padding=1)
    assert y.shape == (1, 4, 4, 4)
    z = conv_transpose2d(
        y, Tensor(rng.normal(size=(4, 3, 3, 3))), None, stride=2, padding=1, output_padding=1
    )
    assert z.shape == (1, 3, 8, 8)
    p = max_pool2d(z, 2)
    assert p.shape == (1, 3, 4, 4)
