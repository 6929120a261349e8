# app/services/optimizer.py
"""Adam with bias correction, per-group learning-rate factors and a linear decay schedule."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from app.errors import ContractError, DimensionError, DivergenceError
from app.services.tensor_core import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 - step / total_steps)."""
    if total_steps <= 0:
        raise ContractError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float | dict[str, float],
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> dict[str, np.ndarray]:
    """
    One Adam update on plain arrays. ``lr`` may be a per-name mapping.

    Returns the updated arrays; ``state`` is advanced in place. A non-finite
    gradient raises `DivergenceError` before anything is touched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise DimensionError(f"{name}: grad {np.shape(g)} vs param {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name!r} at step {state.step + 1}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads.get(name, np.zeros_like(p)), dtype=np.float64)
        if weight_decay:
            g = g + weight_decay * p
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        step_lr = lr[name] if isinstance(lr, dict) else lr
        update = step_lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        out[name] = (np.asarray(p, dtype=np.float64) - update).astype(np.asarray(p).dtype)
    return out


class Adam:
    """
    Optimizer over named `Tensor`s; quantizer parameters get ``lr * quant_lr_factor``.

    ``clamp`` runs after every step (interval widths stay >= A_MIN).
    """

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        lr: float,
        *,
        quant_lr_factor: float = 0.1,
        is_quantizer=lambda name: False,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clamp=None,
    ):
        self.params = dict(named_params)
        self.base_lr = lr
        self.factors = {name: (quant_lr_factor if is_quantizer(name) else 1.0) for name in self.params}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.clamp = clamp
        self.state = AdamState()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.base_lr if lr is None else lr
        grads = {name: t.grad for name, t in self.params.items() if t.grad is not None}
        updated = adam_step(
            {name: t.data for name, t in self.params.items()},
            grads,
            self.state,
            {name: lr * f for name, f in self.factors.items()},
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )
        for name, value in updated.items():
            self.params[name].data = value
        if self.clamp is not None:
            self.clamp()

    def load_state(self, step: int, m: dict[str, np.ndarray], v: dict[str, np.ndarray]) -> None:
        self.state = AdamState(
            step=step,
            m={k: np.asarray(a, dtype=np.float64) for k, a in m.items()},
            v={k: np.asarray(a, dtype=np.float64) for k, a in v.items()},
        )
