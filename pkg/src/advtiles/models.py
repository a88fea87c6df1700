"""Architecture builders, prediction, and checkpoint serialization.

Builders are deterministic in their seed: building twice with the same seed
yields identical initial parameters. Parameter counts of the GAN generator,
GAN discriminator, and water segmenter are pinned layer by layer by tests.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dropout,
    Flatten,
    LeakyReLU,
    Linear,
    LogSoftmax,
    MaxPool2d,
    Model,
    ReLU,
    Reshape,
    Sigmoid,
    Tanh,
)
from .tensor import Tensor

__all__ = [
    "build_desknet",
    "build_advgan_generator",
    "build_advgan_discriminator",
    "build_unet_water",
    "build_from_id",
    "predict",
    "save_model",
    "load_model",
]

DESKNET_GEOMETRIES = {28: 1, 64: 3, 224: 3}


def build_desknet(
    num_classes: int = 2,
    *,
    input_size: int = 64,
    width_scale: float = 1.0,
    seed: int = 0,
) -> Model:
    """Small from-scratch tile classifier: 3 strided conv blocks + 3-layer head.

    Head dropout rates are 0.4/0.2/0.2 with leaky-ReLU activations and a
    log-softmax output. Accepted geometries: 28 (grayscale) and 64/224 (RGB).
    """
    if input_size not in DESKNET_GEOMETRIES:
        raise ValueError(f"unsupported input geometry {input_size}; expected one of 28/64/224")
    channels = DESKNET_GEOMETRIES[input_size]
    rng = np.random.default_rng(seed)
    widths = [max(1, int(round(w * width_scale))) for w in (16, 32, 64)]
    spatial = input_size
    layers: list[tuple[str, object]] = []
    c_in = channels
    for i, c_out in enumerate(widths, start=1):
        layers.append((f"conv{i}", Conv2d(c_in, c_out, 3, 2, 1, rng)))
        layers.append((f"bn{i}", BatchNorm2d(c_out)))
        layers.append((f"act{i}", LeakyReLU(0.01)))
        spatial = (spatial + 2 - 3) // 2 + 1
        c_in = c_out
    pool = spatial // 4
    layers.append(("pool", MaxPool2d(pool)))
    flat = widths[-1] * 16
    layers += [
        ("flatten", Flatten()),
        ("drop1", Dropout(0.4)),
        ("fc1", Linear(flat, 256, rng)),
        ("act4", LeakyReLU(0.01)),
        ("drop2", Dropout(0.2)),
        ("fc2", Linear(256, 64, rng)),
        ("act5", LeakyReLU(0.01)),
        ("drop3", Dropout(0.2)),
        ("fc3", Linear(64, num_classes, rng)),
        ("logsoftmax", LogSoftmax(axis=1)),
    ]
    return Model(
        "desknet",
        layers,
        expected_input=(channels, input_size, input_size),
        build_args={
            "num_classes": num_classes,
            "input_size": input_size,
            "width_scale": width_scale,
            "seed": seed,
        },
    )


def build_advgan_generator(*, small: bool = False, out_channels: int = 3, seed: int = 0) -> Model:
    """Noise-to-patch generator: Linear 100 -> 128x7x7, conv-transpose upscaling, tanh.

    The full stack reaches 3x224x224 and has exactly 808,299 parameters. The
    ``small`` variant reaches 28x28 for quick baseline runs and is excluded
    from the golden counts.
    """
    rng = np.random.default_rng(seed)
    if small:
        layers = [
            ("fc", Linear(100, 128 * 7 * 7, rng)),
            ("reshape", Reshape((128, 7, 7))),
            ("up1", ConvTranspose2d(128, 32, 4, 2, 1, rng)),
            ("bn1", BatchNorm2d(32)),
            ("act1", ReLU()),
            ("up2", ConvTranspose2d(32, out_channels, 4, 2, 1, rng)),
            ("tanh", Tanh()),
        ]
        return Model(
            "advgan_gen_small",
            layers,
            expected_input=(100,),
            build_args={"small": True, "out_channels": out_channels, "seed": seed},
        )
    stages = [(128, 64), (64, 32), (32, 16), (16, 8)]
    layers = [("fc", Linear(100, 128 * 7 * 7, rng)), ("reshape", Reshape((128, 7, 7)))]
    for i, (c_in, c_out) in enumerate(stages, start=1):
        layers.append((f"up{i}", ConvTranspose2d(c_in, c_out, 4, 2, 1, rng)))
        layers.append((f"bn{i}", BatchNorm2d(c_out)))
        layers.append((f"act{i}", ReLU()))
    layers += [("up5", ConvTranspose2d(8, 3, 4, 2, 1, rng)), ("tanh", Tanh())]
    return Model(
        "advgan_gen",
        layers,
        expected_input=(100,),
        build_args={"small": False, "out_channels": 3, "seed": seed},
    )


def build_advgan_discriminator(*, small: bool = False, pair_channels: int = 6, seed: int = 0) -> Model:
    """Real/generated pair discriminator over channel-concatenated inputs.

    Two strided conv + batchnorm + leaky-ReLU stages, flatten, linear to a
    scalar, sigmoid. Full stack: 6x224x224 input, exactly 539,201 parameters.
    """
    rng = np.random.default_rng(seed)
    if small:
        layers = [
            ("conv1", Conv2d(pair_channels, 32, 4, 2, 1, rng)),
            ("bn1", BatchNorm2d(32)),
            ("act1", LeakyReLU(0.2)),
            ("conv2", Conv2d(32, 64, 4, 2, 1, rng)),
            ("bn2", BatchNorm2d(64)),
            ("act2", LeakyReLU(0.2)),
            ("flatten", Flatten()),
            ("fc", Linear(64 * 7 * 7, 1, rng)),
            ("sigmoid", Sigmoid()),
        ]
        return Model(
            "advgan_disc_small",
            layers,
            expected_input=(pair_channels, 28, 28),
            build_args={"small": True, "pair_channels": pair_channels, "seed": seed},
        )
    layers = [
        ("conv1", Conv2d(6, 64, 4, 2, 1, rng)),
        ("bn1", BatchNorm2d(64)),
        ("act1", LeakyReLU(0.2)),
        ("conv2", Conv2d(64, 128, 4, 2, 1, rng)),
        ("bn2", BatchNorm2d(128)),
        ("act2", LeakyReLU(0.2)),
        ("flatten", Flatten()),
        ("fc", Linear(128 * 56 * 56, 1, rng)),
        ("sigmoid", Sigmoid()),
    ]
    return Model(
        "advgan_disc",
        layers,
        expected_input=(6, 224, 224),
        build_args={"small": False, "pair_channels": 6, "seed": seed},
    )


def build_unet_water(*, seed: int = 0) -> Model:
    """Water-segmenter encoder-decoder over 3x128x128 tiles, 1x128x128 logit map.

    Five 3x3 conv-down stages (64..1024 channels, stride-2 halving after the
    first), four conv-transpose up stages (the first 2x2, the rest 3x3 with
    output padding), and a final 1x1 conv.
    """
    rng = np.random.default_rng(seed)
    layers: list[tuple[str, object]] = []
    downs = [(3, 64, 1), (64, 128, 2), (128, 256, 2), (256, 512, 2), (512, 1024, 2)]
    for i, (c_in, c_out, stride) in enumerate(downs, start=1):
        layers.append((f"down{i}", Conv2d(c_in, c_out, 3, stride, 1, rng)))
        layers.append((f"dbn{i}", BatchNorm2d(c_out)))
        layers.append((f"dact{i}", ReLU()))
    ups = [
        (1024, 512, 2, 2, 0, 0),
        (512, 256, 3, 2, 1, 1),
        (256, 128, 3, 2, 1, 1),
        (128, 64, 3, 2, 1, 1),
    ]
    for i, (c_in, c_out, k, s, p, op) in enumerate(ups, start=1):
        layers.append((f"up{i}", ConvTranspose2d(c_in, c_out, k, s, p, rng, output_padding=op)))
        layers.append((f"ubn{i}", BatchNorm2d(c_out)))
        layers.append((f"uact{i}", ReLU()))
    layers.append(("head", Conv2d(64, 1, 1, 1, 0, rng)))
    return Model("unet_water", layers, expected_input=(3, 128, 128), build_args={"seed": seed})


_BUILDERS = {
    "desknet": build_desknet,
    "advgan_gen": build_advgan_generator,
    "advgan_gen_small": build_advgan_generator,
    "advgan_disc": build_advgan_discriminator,
    "advgan_disc_small": build_advgan_discriminator,
    "unet_water": build_unet_water,
}


def build_from_id(architecture_id: str, **build_args) -> Model:
    if architecture_id not in _BUILDERS:
        raise ValueError(f"unknown architecture id '{architecture_id}'")
    return _BUILDERS[architecture_id](**build_args)


def predict(model: Model, images) -> tuple[np.ndarray, np.ndarray]:
    """Class labels and per-class log-probabilities; ties break toward class 0."""
    if model.training:
        raise ValueError("predict requires the model in eval mode")
    logprobs = model.forward(Tensor(np.asarray(images))).data
    # argmax returns the first maximal index, so exact ties resolve to class 0
    labels = np.argmax(logprobs, axis=1)
    return labels, logprobs


# ---------------------------------------------------------------------------
# Checkpoints: JSON shape manifest + flat little-endian float64 binary
# ---------------------------------------------------------------------------


def save_model(model: Model, path) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (parameter blob)."""
    path = Path(path)
    state = model.state()
    manifest: dict = {
        "format": "advtiles-checkpoint-v1",
        "architecture_id": model.architecture_id,
        "build_args": model.build_args,
        "training": model.training,
        "tensors": {},
    }
    offset = 0
    blob = bytearray()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        manifest["tensors"][name] = {"dims": list(arr.shape), "dtype": "float64", "offset": offset}
        blob.extend(arr.tobytes())
        offset += arr.size
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    path.with_suffix(".bin").write_bytes(bytes(blob))


def load_model(path) -> Model:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != "advtiles-checkpoint-v1":
        raise ValueError(f"not an advtiles checkpoint: {path}")
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    state = {}
    for name, meta in manifest["tensors"].items():
        dims = tuple(meta["dims"])
        n = int(np.prod(dims)) if dims else 1
        state[name] = raw[meta["offset"] : meta["offset"] + n].reshape(dims).astype(np.float64)
    model = build_from_id(manifest["architecture_id"], **manifest["build_args"])
    model.load_state(state)
    model.training = bool(manifest.get("training", False))
    return model
