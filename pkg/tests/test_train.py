"""Optimizer update rules and training-loop behavior."""

import numpy as np
import pytest

from advtiles.models import build_advgan_discriminator, build_advgan_generator, build_desknet
from advtiles.optim import Optimizer, OptimizerConfig
from advtiles.tensor import Tensor
from advtiles.train import TrainingDiverged, bce_loss, train_classifier, train_gan


def _blob_dataset(seed, n_train=48, n_val=24):
    """Two-class 28x28 set separable by mean brightness."""
    rng = np.random.default_rng(seed)

    def make(n):
        labels = rng.integers(0, 2, size=n)
        base = np.where(labels[:, None, None, None] == 1, 0.75, 0.25)
        images = np.clip(base + rng.normal(0, 0.08, size=(n, 1, 28, 28)), 0.0, 1.0)
        return images, labels

    return make(n_train), make(n_val)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(momentum=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(kind="lbfgs")
    with pytest.raises(ValueError):
        OptimizerConfig(betas=(1.0, 0.999))


def test_sgd_momentum_single_step_analytic():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Optimizer({"p": p}, OptimizerConfig(kind="sgd_momentum", learning_rate=0.1, momentum=0.5))
    p.grad = np.array([0.5, -1.0])
    opt.step()
    assert np.allclose(p.data, [1.0 - 0.05, -2.0 + 0.1])
    # second step folds the momentum buffer in
    p.grad = np.array([0.5, -1.0])
    opt.step()
    assert np.allclose(p.data, [0.95 - 0.1 * (0.5 * 0.5 + 0.5), -1.9 + 0.1 * 1.5])


def test_adam_first_step_is_signlike():
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = Optimizer({"p": p}, OptimizerConfig(kind="adam", learning_rate=0.01))
    p.grad = np.array([3.0, -0.2])
    opt.step()
    assert np.allclose(p.data, [1.0 - 0.01, 1.0 + 0.01], atol=1e-6)


def test_zero_learning_rate_step_is_noop():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for kind in ("sgd_momentum", "adam", "radam"):
        opt = Optimizer({"p": p}, OptimizerConfig(kind=kind, learning_rate=1.0))
        opt.lr = 0.0
        p.grad = np.array([5.0, -5.0])
        opt.step()
        assert np.array_equal(p.data, [1.0, 2.0])


def test_step_decay_schedule():
    cfg = OptimizerConfig(learning_rate=1e-2, decay_factor=100.0, decay_every=2)
    assert cfg.lr_at_epoch(0) == 1e-2
    assert cfg.lr_at_epoch(1) == 1e-2
    assert cfg.lr_at_epoch(2) == pytest.approx(1e-4)
    assert cfg.lr_at_epoch(4) == pytest.approx(1e-6)


def test_zero_epochs_is_noop():
    model = build_desknet(input_size=28, seed=0)
    before = model.state()
    report = train_classifier(model, _blob_dataset(0), OptimizerConfig(), epochs=0, seed=0)
    assert report.train_loss == [] and report.val_loss == [] and report.val_accuracy == []
    assert all(np.array_equal(before[k], v) for k, v in model.state().items())


def test_empty_dataset_rejected():
    model = build_desknet(input_size=28, seed=0)
    empty = (np.zeros((0, 1, 28, 28)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        train_classifier(model, (empty, empty), OptimizerConfig(), epochs=1, seed=0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_val_loss_decreases_over_training(seed):
    model = build_desknet(input_size=28, seed=seed)
    report = train_classifier(
        model,
        _blob_dataset(seed),
        OptimizerConfig(kind="sgd_momentum", learning_rate=1e-2, momentum=0.1),
        epochs=5,
        seed=seed,
    )
    assert report.val_loss[-1] < report.val_loss[0]


def test_three_epochs_reach_deployable_accuracy():
    # oracle: the synthetic task is linearly separable by construction, so a
    # plain logistic baseline on raw pixels must clear the same bar
    from advtiles.datasets import SynthConfig, corpus_arrays, synth_corpus

    corpus = synth_corpus(
        SynthConfig(count=240, tile_size=64, palette="urban", seed=0, building_probability=0.5)
    )
    train, test = corpus_arrays(corpus.train_tiles()), corpus_arrays(corpus.test_tiles())

    X = train[0].reshape(len(train[1]), -1)
    y = train[1].astype(float)
    Xt = test[0].reshape(len(test[1]), -1)
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(400):
        p = 1.0 / (1.0 + np.exp(-np.clip(X @ w + b, -500, 500)))
        g = (p - y) / len(y)
        w -= 2.0 * (X.T @ g)
        b -= 2.0 * g.sum()
    scores = Xt @ w + b
    assert ((scores > 0).astype(int) == test[1]).mean() >= 0.90

    model = build_desknet(input_size=64, seed=0)
    report = train_classifier(
        model,
        (train, test),
        OptimizerConfig(kind="adam", learning_rate=1e-3),
        epochs=3,
        seed=0,
        batch_size=8,
    )
    assert report.val_accuracy[-1] >= 0.90


def test_training_determinism():
    def run():
        model = build_desknet(input_size=28, seed=4)
        train_classifier(model, _blob_dataset(4), OptimizerConfig(), epochs=2, seed=4)
        return model.state()

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_divergence_raises():
    model = build_desknet(input_size=28, seed=0)
    with pytest.raises(TrainingDiverged):
        train_classifier(
            model,
            _blob_dataset(0),
            OptimizerConfig(kind="sgd_momentum", learning_rate=1e12),
            epochs=3,
            seed=0,
        )


def test_bce_single_step_raises_real_probability():
    # 1-parameter discriminator p = sigmoid(w * x): closed-form descent on BCE
    # moves w by lr * (1 - p) * x, so p on a positive example must rise
    w = Tensor(np.array([[0.2]]), requires_grad=True)
    x = np.array([[1.5], [0.7]])
    opt = Optimizer({"w": w}, OptimizerConfig(kind="sgd_momentum", learning_rate=0.5, momentum=0.0))

    def prob():
        return (Tensor(x) @ w.transpose2d()).sigmoid()

    before = prob().data.copy()
    loss = bce_loss(prob(), np.ones((2, 1)))
    opt.zero_grad()
    loss.backward()
    expected_w = w.data[0, 0] + 0.5 * float(np.mean((1.0 - before) * x))
    opt.step()
    assert w.data[0, 0] == pytest.approx(expected_w)
    assert np.all(prob().data > before)


def test_gan_zero_epochs_noop():
    gen = build_advgan_generator(small=True, out_channels=1, seed=0)
    disc = build_advgan_discriminator(small=True, pair_channels=2, seed=0)
    g_before, d_before = gen.state(), disc.state()
    _, _, report = train_gan(gen, disc, np.zeros((4, 1, 28, 28)), OptimizerConfig(kind="adam"), epochs=0, seed=0)
    assert report.train_loss == []
    assert all(np.array_equal(g_before[k], v) for k, v in gen.state().items())
    assert all(np.array_equal(d_before[k], v) for k, v in disc.state().items())


def test_gan_training_smoke():
    rng = np.random.default_rng(0)
    images = rng.random((12, 1, 28, 28))
    gen = build_advgan_generator(small=True, out_channels=1, seed=1)
    disc = build_advgan_discriminator(small=True, pair_channels=2, seed=2)
    gen, disc, report = train_gan(
        gen,
        disc,
        images,
        OptimizerConfig(kind="adam", learning_rate=2e-4, betas=(0.5, 0.999)),
        epochs=2,
        seed=3,
        batch_size=4,
    )
    assert len(report.train_loss) == 2
    assert len(report.notes["real_accuracy"]) == 2
    assert all(np.isfinite(v) for v in report.train_loss + report.val_loss)
    out = gen.forward(Tensor(np.zeros((1, 100)))).data
    assert out.min() >= -1.0 and out.max() <= 1.0
