"""Adaptive-moment optimizer with bias correction and global-norm clipping."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class NonFiniteGradient(RuntimeError):
    """Experiment-level fault: a gradient went inf/nan; the run is abandoned."""


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.current_lr = 0.0
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def adam_step(params: list[Tensor], state: AdamState, lr: float):
    """One in-place update; grads must already be populated."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step_count += 1
    state.current_lr = lr
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient at step {t}, param {i}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)
