"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

import contextlib

import numpy as np

from turngraph import tensor as T

STEP = 1e-5
TOL = 1e-4
KINK_MARGIN = 1e-3


@contextlib.contextmanager
def kink_monitor():
    """Record the smallest |pre-activation| fed to a piecewise-linear op."""
    seen = [np.inf]
    orig_relu, orig_leaky = T.relu, T.leaky_relu

    def relu(a):
        seen[0] = min(seen[0], float(np.min(np.abs(T.as_tensor(a).data), initial=np.inf)))
        return orig_relu(a)

    def leaky(a, slope=T.LEAKY_SLOPE):
        seen[0] = min(seen[0], float(np.min(np.abs(T.as_tensor(a).data), initial=np.inf)))
        return orig_leaky(a, slope)

    T.relu, T.leaky_relu = relu, leaky
    try:
        yield seen
    finally:
        T.relu, T.leaky_relu = orig_relu, orig_leaky


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; two vectors that are both ~0 agree."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-10:
        return float(np.linalg.norm(analytic - numeric))
    return float(np.linalg.norm(analytic - numeric) / denom)


def check(fn, params: dict, max_coords: int | None = None, rng=None, step: float = STEP) -> dict[str, float]:
    """Relative error per parameter between backward() and central differences.

    ``fn`` builds a scalar Tensor from the current ``params``. With
    ``max_coords`` only that many coordinates per parameter are probed, always
    including the largest analytic entries.
    """
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    loss = fn()
    T.backward(loss)
    errors = {}
    for name, p in params.items():
        grad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            top = np.argsort(-np.abs(grad.reshape(-1)))[: max_coords // 2]
            rest = (rng or np.random.default_rng(0)).choice(flat.size, max_coords - len(top), replace=False)
            coords = np.unique(np.concatenate([top, rest]))
        numeric = np.empty(len(coords))
        with T.no_grad():
            for k, c in enumerate(coords):
                old = flat[c]
                flat[c] = old + step
                up = fn().item()
                flat[c] = old - step
                down = fn().item()
                flat[c] = old
                numeric[k] = (up - down) / (2 * step)
        errors[name] = rel_error(grad.reshape(-1)[coords], numeric)
        p.grad = None
    return errors


def check_with_resample(build, seed: int, attempts: int = 50, **kw) -> dict[str, float]:
    """``build(rng)`` returns (fn, params). Points with a pre-activation within
    ``KINK_MARGIN`` of a kink are redrawn."""
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        fn, params = build(rng)
        with kink_monitor() as seen:
            with T.no_grad():
                fn()
        if seen[0] >= KINK_MARGIN:
            return check(fn, params, rng=rng, **kw)
    raise RuntimeError(f"no kink-free point found for seed {seed}")
