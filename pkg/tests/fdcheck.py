"""Central finite-difference gradient checking.

The numeric side perturbs raw numpy buffers and re-runs the forward
function, fully independent of the tape's backward rules. Comparison is
|analytic - numeric| <= atol + rtol * |numeric| per coordinate.
"""

from __future__ import annotations

import numpy as np

from spixel.tensor import Tape, Tensor

EPS = 1e-5
RTOL = 1e-4
ATOL = 1e-7


def numeric_grad(f, arr: np.ndarray, eps: float = EPS, coords=None) -> np.ndarray:
    """d f() / d arr by central differences; arr is perturbed in place."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        keep = flat[i]
        flat[i] = keep + eps
        fp = f()
        flat[i] = keep - eps
        fm = f()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def check_gradients(build_loss, tensors: dict[str, Tensor], eps: float = EPS,
                    rtol: float = RTOL, atol: float = ATOL,
                    max_coords_per_tensor: int | None = None,
                    rng: np.random.Generator | None = None) -> None:
    """Assert tape gradients of build_loss() match finite differences.

    build_loss must be a pure function of the tensors' current .data.
    With max_coords_per_tensor set, a random coordinate subset per tensor
    is checked (needed for full-model checks to stay inside time budgets).
    """
    for t in tensors.values():
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }

    def scalar():
        return float(build_loss().data)

    for name, t in tensors.items():
        coords = None
        if max_coords_per_tensor is not None and t.data.size > max_coords_per_tensor:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(t.data.size, size=max_coords_per_tensor, replace=False)
            coords = [int(c) for c in np.sort(coords)]
        numeric = numeric_grad(scalar, t.data, eps=eps, coords=coords)
        a = analytic[name].ravel()
        n = numeric.ravel()
        sel = list(coords) if coords is not None else slice(None)
        diff = np.abs(a[sel] - n[sel])
        bound = atol + rtol * np.abs(n[sel])
        assert np.all(diff <= bound), (
            f"{name}: max |analytic-numeric| = {diff.max():.3e}, "
            f"worst allowed {bound[np.argmax(diff - bound)]:.3e}"
        )


def away_from_kinks(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    """Random values with |x| >= margin, for relu-family finite differences."""
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0) * margin, x)
    return x
