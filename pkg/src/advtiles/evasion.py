"""White-box evasion attacks: FGSM, PGD, and binary DeepFool.

Attacks operate on pixels in [0, 1]; when a model expects normalized inputs
the normalization is folded into the differentiated graph so gradients arrive
in pixel space (``normalized_space`` budgets clamp to the normalized range
instead).
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .imageops import _norm_constants
from .layers import Model
from .metrics import ConfusionMatrix, confusion
from .tensor import Tensor
from .train import nll_loss

__all__ = [
    "AttackBudget",
    "AdversarialExample",
    "AttackError",
    "fgsm",
    "pgd",
    "deepfool",
    "evaluate_attack",
]


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float = 0.1
    alpha: float = 2 / 255
    num_steps: int = 10
    overshoot: float = 0.02
    max_iter: int = 50
    random_start: bool = False
    normalized_space: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.num_steps < 1 or self.max_iter < 1:
            raise ValueError("num_steps and max_iter must be positive")
        if self.overshoot < 0:
            raise ValueError("overshoot must be non-negative")


@dataclass
class AdversarialExample:
    original: np.ndarray
    perturbed: np.ndarray
    perturbation: np.ndarray = field(init=False)
    attack_id: str = ""
    success: bool = False
    linf: float = field(init=False)
    l2: float = field(init=False)
    iterations: int = 0

    def __post_init__(self):
        self.perturbation = self.perturbed - self.original
        self.linf = float(np.abs(self.perturbation).max()) if self.perturbation.size else 0.0
        self.l2 = float(np.sqrt((self.perturbation**2).sum()))


def _clamp(x: np.ndarray, budget: AttackBudget) -> np.ndarray:
    if not budget.normalized_space:
        return np.clip(x, 0.0, 1.0)
    mean, std = _norm_constants(x.shape[0])
    lo = ((0.0 - mean) / std)[:, None, None]
    hi = ((1.0 - mean) / std)[:, None, None]
    return np.clip(x, lo, hi)


def _predict_one(model: Model, image: np.ndarray) -> int:
    logp = model.forward(Tensor(image[None])).data[0]
    return int(np.argmax(logp))


def _loss_gradient(model: Model, image: np.ndarray, label: int) -> np.ndarray:
    x = Tensor(image[None], requires_grad=True)
    loss = nll_loss(model.forward(x), [label])
    loss.backward()
    return x.grad[0]


def _margin_and_gradient(model: Model, image: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary logit margin f = logp[1] - logp[0] and its input gradient."""
    x = Tensor(image[None], requires_grad=True)
    logp = model.forward(x)
    margin = (logp * Tensor(np.array([[-1.0, 1.0]]))).sum()
    margin.backward()
    return margin.item(), x.grad[0]


def _require_eval(model: Model) -> None:
    if model.training:
        raise ValueError("attacks require the model in eval mode")


def fgsm(model: Model, image: np.ndarray, label: int, budget: AttackBudget) -> AdversarialExample:
    """Single-step sign attack: x' = clamp(x + eps * sign(grad_x NLL))."""
    _require_eval(model)
    image = np.asarray(image, dtype=np.float64)
    grad = _loss_gradient(model, image, label)
    perturbed = _clamp(image + budget.epsilon * np.sign(grad), budget)
    success = _predict_one(model, perturbed) != label
    return AdversarialExample(image, perturbed, attack_id="fgsm", success=success, iterations=1)


def pgd(
    model: Model,
    image: np.ndarray,
    label: int,
    budget: AttackBudget,
    rng: np.random.Generator | None = None,
) -> AdversarialExample:
    """Iterated sign ascent, projected onto the epsilon ball every step."""
    _require_eval(model)
    if budget.alpha > budget.epsilon > 0:
        warnings.warn("PGD step size alpha exceeds epsilon; one step saturates the ball")
    image = np.asarray(image, dtype=np.float64)
    x = image.copy()
    if budget.random_start:
        if rng is None:
            rng = np.random.default_rng(0)
        x = _clamp(image + rng.uniform(-budget.epsilon, budget.epsilon, size=image.shape), budget)
    for _ in range(budget.num_steps):
        grad = _loss_gradient(model, x, label)
        x = x + budget.alpha * np.sign(grad)
        x = _clamp(image + np.clip(x - image, -budget.epsilon, budget.epsilon), budget)
    success = _predict_one(model, x) != label
    return AdversarialExample(
        image, x, attack_id="pgd", success=success, iterations=budget.num_steps
    )


def deepfool(
    model: Model,
    image: np.ndarray,
    budget: AttackBudget,
    label: int | None = None,
) -> AdversarialExample:
    """Binary DeepFool: project onto the linearized decision boundary until
    the prediction flips, then overshoot by (1 + eta).

    Exhausting max_iter without a flip reports the best iterate with
    success=False rather than raising.
    """
    _require_eval(model)
    image = np.asarray(image, dtype=np.float64)
    start_class = _predict_one(model, image)
    if label is not None and start_class != label:
        return AdversarialExample(image, image.copy(), attack_id="deepfool", success=True)
    x = image.copy()
    total = np.zeros_like(image)
    for iteration in range(1, budget.max_iter + 1):
        margin, grad = _margin_and_gradient(model, x)
        norm_sq = float((grad**2).sum())
        if norm_sq < 1e-24:
            raise AttackError("deepfool: zero margin gradient")
        # Newton projection onto the linearized boundary; the overshoot
        # factor on the candidate pushes past it
        total = total - (margin / norm_sq) * grad
        x = image + total
        candidate = np.clip(image + (1.0 + budget.overshoot) * total, 0.0, 1.0)
        if _predict_one(model, candidate) != start_class:
            return AdversarialExample(
                image, candidate, attack_id="deepfool", success=True, iterations=iteration
            )
    best = np.clip(image + (1.0 + budget.overshoot) * total, 0.0, 1.0)
    return AdversarialExample(
        image, best, attack_id="deepfool", success=False, iterations=budget.max_iter
    )


_METHODS = {"fgsm": fgsm, "pgd": pgd, "deepfool": deepfool}


def evaluate_attack(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    method: str,
    budget: AttackBudget,
    threads: int = 1,
    master_seed: int = 0,
) -> tuple[ConfusionMatrix, list[dict], float]:
    """Attack every image, aggregate post-attack predictions.

    Returns (confusion matrix, per-image records, mean seconds per image).
    Per-image failures are recorded, not fatal. Work may run on a thread
    pool; each image draws from its own (seed, index) substream and results
    reduce in index order, so thread count cannot change the output.
    """
    _require_eval(model)
    if method not in _METHODS and method != "none":
        raise ValueError(f"unknown attack method '{method}'")
    labels = np.asarray(labels, dtype=int)

    def run_one(index: int) -> tuple[dict, int]:
        image = images[index]
        label = int(labels[index])
        start = time.perf_counter()
        record: dict = {"index": index}
        try:
            if method == "none":
                example = AdversarialExample(image, image.copy(), attack_id="none")
                example.success = _predict_one(model, image) != label
            elif method == "deepfool":
                example = deepfool(model, image, budget, label=label)
            elif method == "pgd":
                rng = np.random.default_rng([master_seed, "pgd".encode()[0], index])
                example = pgd(model, image, label, budget, rng=rng)
            else:
                example = fgsm(model, image, label, budget)
            prediction = _predict_one(model, example.perturbed)
            record.update(
                success=bool(example.success),
                linf=example.linf,
                l2=example.l2,
                ms=(time.perf_counter() - start) * 1e3,
            )
        except AttackError as exc:
            prediction = _predict_one(model, image)
            record.update(
                success=False, linf=0.0, l2=0.0, ms=(time.perf_counter() - start) * 1e3,
                error=str(exc),
            )
        return record, prediction

    indices = range(len(labels))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_one, indices))
    else:
        outcomes = [run_one(i) for i in indices]
    records = [rec for rec, _ in outcomes]
    predictions = np.array([pred for _, pred in outcomes], dtype=int)
    cm = confusion(labels, predictions)
    mean_seconds = float(np.mean([r["ms"] for r in records]) / 1e3) if records else 0.0
    return cm, records, mean_seconds
