"""Neural-network layers and the Model container built on the autodiff tape.

The layer set is a fixed compatibility contract (see :func:`supported_layers`);
architecture builders in :mod:`advtiles.models` compose only these kinds.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, conv_transpose2d, max_pool2d

__all__ = [
    "Layer",
    "Linear",
    "Conv2d",
    "ConvTranspose2d",
    "BatchNorm2d",
    "MaxPool2d",
    "Dropout",
    "ReLU",
    "LeakyReLU",
    "Tanh",
    "Sigmoid",
    "LogSoftmax",
    "Flatten",
    "Reshape",
    "Model",
    "ForwardContext",
    "supported_layers",
]

SUPPORTED_LAYERS = (
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
)


def supported_layers() -> tuple[str, ...]:
    """Layer kinds the engine differentiates; the contract for model builders."""
    return SUPPORTED_LAYERS


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ForwardContext:
    """Per-call forward state: train/eval mode and the dropout RNG stream."""

    def __init__(self, training: bool, rng: np.random.Generator | None = None):
        self.training = training
        self.rng = rng


class Layer:
    kind = "base"

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_uniform_init(rng, (out_features, in_features), in_features), True)
        self.bias = Tensor(_uniform_init(rng, (out_features,), in_features), True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, ctx):
        return x @ self.weight.transpose2d() + self.bias


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride, padding, rng):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(
            _uniform_init(rng, (out_channels, in_channels, kernel, kernel), fan_in), True
        )
        self.bias = Tensor(_uniform_init(rng, (out_channels,), fan_in), True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, ctx):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Layer):
    kind = "conv_transpose2d"

    def __init__(self, in_channels, out_channels, kernel, stride, padding, rng, output_padding=0):
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(
            _uniform_init(rng, (in_channels, out_channels, kernel, kernel), fan_in), True
        )
        self.bias = Tensor(_uniform_init(rng, (out_channels,), fan_in), True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, ctx):
        return conv_transpose2d(
            x, self.weight, self.bias, self.stride, self.padding, self.output_padding
        )


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Tensor(np.ones(channels), True)
        self.bias = Tensor(np.zeros(channels), True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, ctx):
        gamma = self.weight.reshape(1, self.channels, 1, 1)
        beta = self.bias.reshape(1, self.channels, 1, 1)
        if ctx.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            count = x.size // self.channels
            unbias = count / (count - 1) if count > 1 else 1.0
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * unbias * var.data.reshape(-1)
            xhat = centered * ((var + self.eps) ** -0.5)
        else:
            mu = self.running_mean.reshape(1, self.channels, 1, 1)
            scale = 1.0 / np.sqrt(self.running_var.reshape(1, self.channels, 1, 1) + self.eps)
            xhat = (x - Tensor(mu)) * Tensor(scale)
        return xhat * gamma + beta


class MaxPool2d(Layer):
    kind = "max_pool2d"

    def __init__(self, kernel: int):
        self.kernel = kernel

    def forward(self, x, ctx):
        if self.kernel == 1:
            return x
        return max_pool2d(x, self.kernel)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, ctx):
        if not ctx.training or self.p == 0.0:
            return x
        if ctx.rng is None:
            raise ValueError("training-mode dropout requires an RNG stream in the forward context")
        mask = (ctx.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * Tensor(mask)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        return x.relu()


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.01):
        self.slope = slope

    def forward(self, x, ctx):
        return x.leaky_relu(self.slope)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, ctx):
        return x.tanh()


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, ctx):
        return x.sigmoid()


class LogSoftmax(Layer):
    kind = "log_softmax"

    def __init__(self, axis: int = 1):
        self.axis = axis

    def forward(self, x, ctx):
        return x.log_softmax(self.axis)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, ctx):
        return x.reshape(x.shape[0], -1)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)

    def forward(self, x, ctx):
        return x.reshape((x.shape[0],) + self.shape)


class Model:
    """An ordered stack of named layers with a train/eval mode flag."""

    def __init__(
        self,
        architecture_id: str,
        layers: list[tuple[str, Layer]],
        expected_input: tuple[int, int, int] | None = None,
        build_args: dict | None = None,
    ):
        self.architecture_id = architecture_id
        self.layers = layers
        self.expected_input = expected_input
        self.build_args = dict(build_args or {})
        self.training = True

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if self.expected_input is not None and tuple(x.shape[1:]) != self.expected_input:
            raise ValueError(
                f"{self.architecture_id} expects input {self.expected_input}, got {tuple(x.shape[1:])}"
            )
        ctx = ForwardContext(self.training, rng)
        for _, layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, layer in self.layers:
            for pname, tensor in layer.params().items():
                out[f"{name}.{pname}"] = tensor
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, layer in self.layers:
            for bname, arr in layer.buffers().items():
                out[f"{name}.{bname}"] = arr
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def layer_param_counts(self) -> list[tuple[str, str, int]]:
        """(layer name, kind, parameter count) per layer, in forward order."""
        return [
            (name, layer.kind, sum(t.size for t in layer.params().values()))
            for name, layer in self.layers
        ]

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    # -- state I/O -------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self.parameters().items()}
        out.update({name: arr.copy() for name, arr in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        expected = set(params) | set(self.buffers())
        if expected != set(state):
            missing = expected - set(state)
            extra = set(state) - expected
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, tensor in params.items():
            if tensor.shape != state[name].shape:
                raise ValueError(f"shape mismatch for '{name}'")
            tensor.data = np.asarray(state[name], dtype=np.float64).copy()
        for lname, layer in self.layers:
            for bname in layer.buffers():
                setattr(layer, bname, np.asarray(state[f"{lname}.{bname}"], dtype=np.float64).copy())

    def copy(self) -> "Model":
        from .models import build_from_id

        clone = build_from_id(self.architecture_id, **self.build_args)
        clone.load_state(self.state())
        clone.training = self.training
        return clone
