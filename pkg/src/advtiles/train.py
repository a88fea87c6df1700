"""Training loops: negative-log-likelihood classification and the BCE GAN."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .layers import Model
from .optim import Optimizer, OptimizerConfig
from .tensor import NonFiniteError, Tensor

__all__ = [
    "TrainReport",
    "TrainingDiverged",
    "nll_loss",
    "bce_loss",
    "evaluate_classifier",
    "train_classifier",
    "train_gan",
]


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf during training."""


@dataclass
class TrainReport:
    epochs: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0
    notes: dict = field(default_factory=dict)

    def curves(self) -> dict[str, list[float]]:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
        }


def nll_loss(logprobs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under log-probabilities."""
    labels = np.asarray(labels, dtype=int)
    n, k = logprobs.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -(logprobs * Tensor(onehot)).sum() * (1.0 / n)


def bce_loss(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy against 0/1 targets, clipped for stability."""
    y = np.asarray(targets, dtype=np.float64).reshape(probs.shape)
    eps = 1e-12
    p = np.clip(probs.data, eps, 1.0 - eps)
    value = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))

    def backward(grad, out):
        return (grad * (p - y) / (p * (1.0 - p) * y.size),)

    return Tensor._result(value, (probs,), backward, "bce")


def _batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def evaluate_classifier(
    model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 32
) -> tuple[float, float]:
    """(mean NLL, accuracy) on a labeled array batch, in eval mode."""
    was_training = model.training
    model.eval()
    labels = np.asarray(labels, dtype=int)
    total_nll = 0.0
    correct = 0
    for idx in _batches(len(labels), batch_size):
        logp = model.forward(Tensor(images[idx])).data
        total_nll += -logp[np.arange(len(idx)), labels[idx]].sum()
        correct += int((np.argmax(logp, axis=1) == labels[idx]).sum())
    model.training = was_training
    return total_nll / len(labels), correct / len(labels)


def train_classifier(
    model: Model,
    dataset,
    opt: OptimizerConfig,
    epochs: int,
    seed: int,
    batch_size: int = 16,
) -> TrainReport:
    """NLL training with per-epoch validation curves.

    ``dataset`` is ((train_images, train_labels), (val_images, val_labels)).
    All shuffling and dropout randomness derives from ``seed``, so a fixed
    seed reproduces the run exactly.
    """
    (train_x, train_y), (val_x, val_y) = dataset
    if len(train_y) == 0 or len(val_y) == 0:
        raise ValueError("empty dataset")
    train_y = np.asarray(train_y, dtype=int)
    report = TrainReport(epochs=epochs)
    optimizer = Optimizer(model.parameters(), opt)
    start = time.perf_counter()
    for epoch in range(epochs):
        optimizer.set_epoch(epoch)
        order = np.random.default_rng([seed, epoch, 0xD5]).permutation(len(train_y))
        model.train()
        losses = []
        try:
            for step, idx in enumerate(_batches(len(train_y), batch_size, order)):
                rng = np.random.default_rng([seed, epoch, step])
                logp = model.forward(Tensor(train_x[idx]), rng=rng)
                loss = nll_loss(logp, train_y[idx])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
            val_nll, val_acc = evaluate_classifier(model, val_x, val_y, batch_size)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"training diverged at epoch {epoch}") from exc
        report.train_loss.append(float(np.mean(losses)))
        report.val_loss.append(val_nll)
        report.val_accuracy.append(val_acc)
    model.eval()
    report.wall_seconds = time.perf_counter() - start
    return report


def train_gan(
    gen: Model,
    disc: Model,
    images: np.ndarray,
    opt: OptimizerConfig,
    epochs: int = 5,
    seed: int = 0,
    batch_size: int = 16,
) -> tuple[Model, Model, TrainReport]:
    """Alternating BCE updates: discriminator on (real, 1) and (generated, 0),
    then generator against label 1.

    The discriminator scores channel-concatenated (reference, query) pairs;
    images arrive in [0, 1] and are rescaled to the generator's tanh range.
    """
    report = TrainReport(epochs=epochs)
    gen_opt = Optimizer(gen.parameters(), opt)
    disc_opt = Optimizer(disc.parameters(), opt)
    real_all = np.asarray(images, dtype=np.float64) * 2.0 - 1.0
    start = time.perf_counter()
    collapse_seen = False
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch, 0x6A]).permutation(len(real_all))
        gen.train()
        disc.train()
        d_losses, g_losses, real_hits, fake_hits, count = [], [], 0, 0, 0
        for step, idx in enumerate(_batches(len(real_all), batch_size, order)):
            rng = np.random.default_rng([seed, epoch, step, 1])
            real = real_all[idx]
            b = len(idx)
            noise = rng.standard_normal((b, 100))
            try:
                fake = gen.forward(Tensor(noise), rng=rng)
                # discriminator update on detached fakes
                d_real = disc.forward(Tensor(np.concatenate([real, real], axis=1)), rng=rng)
                d_fake = disc.forward(
                    Tensor(np.concatenate([real, fake.data], axis=1)), rng=rng
                )
                d_loss = bce_loss(d_real, np.ones(b)) + bce_loss(d_fake, np.zeros(b))
                disc_opt.zero_grad()
                gen_opt.zero_grad()
                d_loss.backward()
                disc_opt.step()

                # generator update against label 1, gradients flowing through disc
                fake = gen.forward(Tensor(noise), rng=rng)
                paired = _concat_channels(Tensor(real), fake)
                d_out = disc.forward(paired, rng=rng)
                g_loss = bce_loss(d_out, np.ones(b))
                disc_opt.zero_grad()
                gen_opt.zero_grad()
                g_loss.backward()
                gen_opt.step()
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite GAN loss at epoch {epoch} step {step}") from exc
            d_losses.append(d_loss.item())
            g_losses.append(g_loss.item())
            real_hits += int((d_real.data > 0.5).sum())
            fake_hits += int((d_fake.data <= 0.5).sum())
            count += b
            if b > 1 and float(fake.data.std(axis=0).mean()) < 1e-5:
                collapse_seen = True
        report.train_loss.append(float(np.mean(g_losses)))
        report.val_loss.append(float(np.mean(d_losses)))
        report.val_accuracy.append((real_hits + fake_hits) / (2 * count))
        report.notes.setdefault("real_accuracy", []).append(real_hits / count)
        report.notes.setdefault("fake_accuracy", []).append(fake_hits / count)
    report.notes["mode_collapse"] = collapse_seen
    report.wall_seconds = time.perf_counter() - start
    gen.eval()
    disc.eval()
    return gen, disc, report


def _concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel-concatenate two (N, C, H, W) tensors inside the graph."""
    value = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def backward(grad, out):
        return (grad[:, :ca], grad[:, ca:])

    return Tensor._result(value, (a, b), backward, "concat")
