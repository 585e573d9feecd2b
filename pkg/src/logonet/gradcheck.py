"""Finite-difference verification of reverse-mode gradients.

The check runs in 64-bit precision: inputs are cast to float64 copies
before evaluation so the central-difference quotient is trustworthy at
the default step h=1e-3.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tensor, backward, no_grad


def check_gradients(f: Callable[..., Tensor],
                    inputs: Union[Tensor, Sequence[Tensor]],
                    h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map the given tensors to a scalar Tensor.  Per element the
    error is |analytic - numeric| / max(1, |analytic|, |numeric|); the
    maximum over all elements of all inputs is returned.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    xs = [Tensor(t.data.astype(np.float64), requires_grad=True, dtype=np.float64)
          for t in inputs]

    loss = f(*xs)
    if loss.size != 1:
        raise ValueError(f"check_gradients needs a scalar function, "
                         f"got output shape {loss.shape}")
    backward(loss)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy()
                for x in xs]

    max_err = 0.0
    with no_grad():
        for x, ga in zip(xs, analytic):
            flat = x.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f(*xs).data.item()
                flat[i] = orig - h
                down = f(*xs).data.item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                denom = max(1.0, abs(gflat[i]), abs(numeric))
                max_err = max(max_err, abs(gflat[i] - numeric) / denom)
    return max_err
