"""First-order optimizers over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators and the step counter."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Optimizer:
    """Adam (default) or plain SGD on a dict of named parameters.

    Adam uses the standard defaults (moment decay 0.9/0.999, eps 1e-8) with
    bias correction. ``method="sgd"`` performs the bare gradient step
    ``p -= lr * g``.
    """

    def __init__(self, params, lr, method="adam", beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if method not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer method {method!r}")
        self.params = params
        self.lr = float(lr)
        self.method = method
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = OptimizerState()
        if method == "adam":
            for name, p in params.items():
                self.state.m[name] = np.zeros_like(p.data)
                self.state.v[name] = np.zeros_like(p.data)

    def step(self, grads):
        """Apply one update. ``grads`` maps Tensor -> ndarray (from backward).

        Parameters absent from ``grads`` are left untouched. A non-finite
        gradient raises TrainingError naming the offending parameter.
        """
        self.state.step += 1
        t = self.state.step
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(
                    f"non-finite gradient for parameter {name!r}", parameter=name)
            if self.method == "sgd":
                p.data -= self.lr * g
            else:
                m = self.state.m[name]
                v = self.state.v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                mhat = m / (1.0 - self.beta1 ** t)
                vhat = v / (1.0 - self.beta2 ** t)
                p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
