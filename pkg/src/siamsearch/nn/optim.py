"""Adam with bias correction, applied in place."""

from __future__ import annotations

import numpy as np

from .core import Parameter


def adam_step(
    params: list[Parameter],
    lr: float,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """``t`` is the 1-based count of updates including this one."""
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / c1
        v_hat = p.adam_v / c2
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
