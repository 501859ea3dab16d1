"""Shared helpers: central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from bevset import autodiff as ad
from bevset.autodiff import Tape, Tensor


def numeric_grad(fn, t: Tensor, flat_index: int, h: float = 1e-5) -> float:
    """Central difference of the scalar fn() w.r.t. one coordinate of t."""
    flat = t.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    fp = fn().item()
    flat[flat_index] = orig - h
    fm = fn().item()
    flat[flat_index] = orig
    return (fp - fm) / (2.0 * h)


def gradcheck(fn, tensors, rng=None, n_samples: int = 10, h: float = 1e-5,
              tol: float = 1e-6) -> float:
    """Compare analytic gradients of fn() against finite differences.

    ``fn`` rebuilds the scalar loss from the given tensors on each call. Large
    tensors are spot-checked at ``n_samples`` random coordinates. Returns the
    worst relative error seen.
    """
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    ad.backward(tape, loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "leaf did not receive a gradient"
        if t.size <= n_samples:
            coords = np.arange(t.size)
        else:
            coords = rng.choice(t.size, size=n_samples, replace=False)
        for i in coords:
            num = numeric_grad(fn, t, int(i), h=h)
            ana = float(t.grad.reshape(-1)[int(i)])
            rel = abs(num - ana) / max(1.0, abs(num), abs(ana))
            worst = max(worst, rel)
            assert rel < tol, (
                f"gradient mismatch at flat index {i} of shape {t.shape}: "
                f"analytic {ana:.10g} vs numeric {num:.10g} (rel {rel:.2e})")
    return worst
