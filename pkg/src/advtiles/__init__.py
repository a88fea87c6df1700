"""Evasion, categorical-inference, and trojan-poisoning attacks against
overhead-tile classifiers, built on a self-contained numpy autodiff stack."""

__version__ = "0.1.0"

from .tensor import NonFiniteError, Tensor  # noqa: F401
