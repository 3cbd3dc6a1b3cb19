"""Float64 numerics shared by every model: Adam updates, finite-difference
gradient checking, and seeded parameter initialization.

All numeric state in this package lives in C-ordered float64 numpy arrays.
Every public operation here either returns finite values or raises.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable
from zlib import crc32

import numpy as np

Array = np.ndarray


def require_finite(arr: Array, name: str) -> Array:
    """Raise ValueError if ``arr`` contains NaN or infinity."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite entries in {name}")
    return arr


def spawn_rng(seed: int, label: str) -> np.random.Generator:
    """Independent reproducible RNG stream for one named purpose.

    Every random draw in the package flows from a single experiment seed.
    Each consumer asks for its own stream keyed by a short label, so adding
    or removing one consumer never perturbs the draws seen by another.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, crc32(label.encode("utf-8"))]))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...] | int, fan_in: int) -> Array:
    """Uniform init on [-s, s] with s = 1/sqrt(fan_in)."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    scale = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-scale, scale, size=shape)


@dataclass
class AdamState:
    """Per-parameter Adam moments plus hyperparameters.

    ``step_count`` is the number of updates already applied; bias correction
    uses step_count + 1 on the next call. Weight decay is decoupled: it is
    applied directly to the parameters, not folded into the gradient.
    """

    first_moment: Array
    second_moment: Array
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(
        cls,
        param: Array,
        learning_rate: float = 1e-3,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> "AdamState":
        return cls(
            first_moment=np.zeros_like(param, dtype=np.float64),
            second_moment=np.zeros_like(param, dtype=np.float64),
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            weight_decay=weight_decay,
        )


def adam_step(param: Array, grad: Array, state: AdamState, name: str = "param") -> Array:
    """One Adam update. Mutates ``state`` and returns the new parameter array."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ValueError(
            f"shape mismatch for {name}: param {param.shape} vs gradient {grad.shape}"
        )
    if state.first_moment.shape != param.shape:
        raise ValueError(
            f"Adam state for {name} has shape {state.first_moment.shape}, "
            f"param has {param.shape}"
        )
    require_finite(grad, f"gradient of {name}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    state.first_moment = b1 * state.first_moment + (1.0 - b1) * grad
    state.second_moment = b2 * state.second_moment + (1.0 - b2) * (grad * grad)
    m_hat = state.first_moment / (1.0 - b1**t)
    v_hat = state.second_moment / (1.0 - b2**t)
    updated = param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    if state.weight_decay != 0.0:
        updated = updated - state.learning_rate * state.weight_decay * param
    return require_finite(updated, f"updated {name}")


def finite_difference_gradient(
    loss_fn: Callable[[Array], float], param: Array, step: float = 1e-5
) -> Array:
    """Central-difference gradient of a scalar loss w.r.t. every entry of ``param``.

    The reference oracle for every analytic gradient in the package. O(2 * size)
    loss evaluations; raises on a non-finite loss value.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.zeros_like(param)
    flat = grad.ravel()
    work = param.copy()
    wflat = work.ravel()
    for i in range(wflat.size):
        orig = wflat[i]
        wflat[i] = orig + step
        up = float(loss_fn(work))
        wflat[i] = orig - step
        down = float(loss_fn(work))
        wflat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"non-finite loss during finite differencing at entry {i}")
        flat[i] = (up - down) / (2.0 * step)
    return grad


def relative_gradient_error(analytic: Array, numeric: Array) -> float:
    """Matrix-level relative L2 error between two gradients."""
    denom = max(float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / denom
