from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, then zero the gradients.

    Parameters without a gradient keep their moments and step count.
    """
    for p in params:
        g = p.grad
        if g is None:
            continue
        if p.adam_m is None:
            p.adam_m = np.zeros_like(p.data)
            p.adam_v = np.zeros_like(p.data)
        p.adam_step += 1
        t = p.adam_step
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * (g * g)
        m_hat = p.adam_m / (1 - beta1 ** t)
        v_hat = p.adam_v / (1 - beta2 ** t)
        if lr != 0.0:
            update = lr * m_hat / (np.sqrt(v_hat) + eps)
            if np.any(update):
                p.data = (p.data - update).astype(p.data.dtype)
                p.version += 1
        p.grad = None
