"""Parameter update rules for network weights and architecture logits.

Parameters and gradients travel as name-keyed dicts of float64 arrays. Both
update rules fold weight decay into the gradient as an additive ``decay * p``
term before any momentum accumulation; this convention is fixed here so runs
are reproducible. ``step`` returns fresh arrays and never mutates its inputs;
optimizer buffers are the only mutable state and can be serialized exactly.
"""

from __future__ import annotations

import math

import numpy as np

Params = dict[str, np.ndarray]


class OptimizerError(ValueError):
    """Gradient keys or shapes do not match the parameters."""


def _check_aligned(what: str, params: Params, grads: Params) -> None:
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise OptimizerError(f"{what}: parameter/gradient keys differ: {sorted(missing)}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise OptimizerError(
                f"{what}: shape mismatch for {name!r}: {p.shape} vs {grads[name].shape}"
            )


class SgdMomentum:
    """Momentum SGD: v <- mu*v + (g + decay*p); p <- p - lr*v."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: Params = {}

    def step(self, params: Params, grads: Params) -> Params:
        _check_aligned("sgd", params, grads)
        out: Params = {}
        for name, p in params.items():
            g = grads[name] + self.weight_decay * p
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            out[name] = p - self.lr * v
        return out

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "velocity": {k: v.tolist() for k, v in self.velocity.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.momentum = state["momentum"]
        self.weight_decay = state["weight_decay"]
        self.velocity = {k: np.asarray(v, dtype=np.float64) for k, v in state["velocity"].items()}


class Adam:
    """Bias-corrected Adam with decay folded into the gradient."""

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 0.0, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.step_count = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Params) -> Params:
        _check_aligned("adam", params, grads)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        out: Params = {}
        for name, p in params.items():
            g = grads[name] + self.weight_decay * p
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            m_hat = m / c1
            v_hat = v / c2
            out[name] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "weight_decay": self.weight_decay,
            "eps": self.eps,
            "step_count": self.step_count,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.beta1, self.beta2 = state["betas"]
        self.weight_decay = state["weight_decay"]
        self.eps = state["eps"]
        self.step_count = state["step_count"]
        self.m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}


class CosineSchedule:
    """Rate annealed from ``initial`` at step 0 to exactly 0 at step ``total``."""

    def __init__(self, initial: float, total: int):
        if total <= 0:
            raise ValueError("cosine schedule needs a positive step count")
        self.initial = float(initial)
        self.total = int(total)

    def rate(self, t: int | float) -> float:
        if not 0 <= t <= self.total:
            raise ValueError(f"schedule step {t} outside [0, {self.total}]")
        return 0.5 * self.initial * (1.0 + math.cos(math.pi * t / self.total))


def clip_global_norm(grads: Params, max_norm: float) -> tuple[Params, float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}, total
