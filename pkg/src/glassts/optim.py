"""Adam optimizer over lists of leaf tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Gradients, ShapeMismatch, Tensor

__all__ = ["AdamState", "adam_init", "adam_step"]


class AdamState:
    """First/second moment accumulators, one pair per parameter."""

    def __init__(self, params: list[Tensor], lr: float, beta1: float,
                 beta2: float, eps: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_init(params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    if not 0.0 < lr < 1.0:
        raise ValueError(f"learning rate must lie in (0, 1), got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError("beta1/beta2 must lie in [0, 1)")
    return AdamState(params, lr, beta1, beta2, eps)


def adam_step(params: list[Tensor], grads, state: AdamState) -> None:
    """One bias-corrected Adam update.

    ``grads`` is either a :class:`Gradients` object from a backward pass or
    a list of arrays aligned with ``params``. Parameters are rebound to
    fresh arrays (never written in place), so tensors saved on earlier
    tapes keep their values.
    """
    if isinstance(grads, Gradients):
        glist = [grads.wrt(p) for p in params]
    else:
        glist = list(grads)
    if len(glist) != len(params) or len(params) != len(state.m):
        raise ShapeMismatch("adam_step: parameter/gradient count mismatch")
    for p, g in zip(params, glist):
        if g.shape != p.data.shape:
            raise ShapeMismatch(
                f"adam_step: gradient shape {g.shape} vs parameter {p.data.shape}"
            )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, glist)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
