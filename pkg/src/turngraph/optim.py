"""AdamW and parameter initialization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


def init_params(shape, scheme: str = "glorot", rng: np.random.Generator | None = None,
                fan: tuple[int, int] | None = None) -> Tensor:
    """Create a trainable tensor.

    ``glorot`` draws U(-b, b) with b = sqrt(6 / (fan_in + fan_out)); the fans
    default to the last two dims (or (n, 1) for vectors) and can be given
    explicitly for stacked per-type weights. ``zeros`` and ``ones`` are
    deterministic.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if any(s <= 0 for s in shape):
        raise ValueError(f"init_params: dims must be positive, got {shape}")
    if scheme == "zeros":
        return Tensor(np.zeros(shape), requires_grad=True)
    if scheme == "ones":
        return Tensor(np.ones(shape), requires_grad=True)
    if scheme != "glorot":
        raise ValueError(f"init_params: unknown scheme {scheme!r}")
    if rng is None:
        raise ValueError("init_params: glorot scheme needs an rng")
    if fan is None:
        fan = (shape[-2], shape[-1]) if len(shape) >= 2 else (shape[0], 1)
    bound = math.sqrt(6.0 / (fan[0] + fan[1]))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.exp_avg.items():
            out[f"m/{k}"] = v
        for k, v in self.exp_avg_sq.items():
            out[f"v/{k}"] = v
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.exp_avg = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m/")}
        self.exp_avg_sq = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v/")}


def adamw_step(params: dict[str, Tensor], state: AdamWState) -> None:
    """One AdamW update with decoupled weight decay, then clear the grads.

    Grads are reset to None rather than zero arrays so a parameter that takes
    no part in the next loss is skipped, exactly as after a checkpoint reload.
    A step where no parameter has a grad is an error.
    """
    if not any(p.grad is not None for p in params.values()):
        raise MissingGradError("adamw_step: no parameter has a gradient; call backward first")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[name]
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
