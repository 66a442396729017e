"""Shared test utilities, chiefly the finite-difference gradient oracle.

The oracle only ever calls forward passes, so it stays independent of the
backward implementations it is used to check.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from lobforge import autodiff as ad
from lobforge.autodiff import Tensor

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad_at(loss_fn: Callable[[], Tensor], tensor: Tensor, flat_idx: int,
                    h: float = FD_STEP) -> float:
    """Central finite difference of the loss wrt one entry of tensor.data."""
    flat = tensor.data.reshape(-1)
    orig = flat[flat_idx]
    with ad.no_grad():
        flat[flat_idx] = orig + h
        f_plus = float(loss_fn().data)
        flat[flat_idx] = orig - h
        f_minus = float(loss_fn().data)
    flat[flat_idx] = orig
    return (f_plus - f_minus) / (2.0 * h)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor],
                    rng: np.random.Generator, samples_per_tensor: int = 4,
                    tol: float = FD_TOL) -> float:
    """Compare analytic grads against the FD oracle on sampled coordinates.

    A relu pre-activation within h of zero makes the h-step difference
    quotient cross the kink, so on mismatch the step shrinks before the
    coordinate counts as a failure; a wrong gradient fails at every step.
    Returns the worst relative error seen; raises AssertionError beyond tol.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for name, t in tensors.items():
        assert t.grad is not None, f"no gradient reached tensor '{name}'"
        n = t.data.size
        count = min(samples_per_tensor, n)
        idxs = rng.choice(n, size=count, replace=False)
        for idx in idxs:
            analytic = float(t.grad.reshape(-1)[idx])
            rel = None
            for h in (FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0):
                fd = numeric_grad_at(loss_fn, t, int(idx), h=h)
                if abs(analytic - fd) <= 1e-8:
                    rel = 0.0
                    break
                rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
                if rel <= tol:
                    break
            worst = max(worst, rel)
            assert rel <= tol, (
                f"gradient mismatch for '{name}'[{idx}]: analytic={analytic:.8g} "
                f"fd={fd:.8g} rel={rel:.3g}"
            )
    return worst
