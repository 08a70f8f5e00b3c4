"""Dense float64 kernels with paired analytic backward passes.

Every forward kernel here has a ``*_backward`` companion that maps the
gradient of a scalar objective w.r.t. the kernel output back to gradients
w.r.t. the kernel inputs. ``finite_diff_check`` verifies any composition of
these kernels against central differences. All kernels are pure functions;
trainable state lives in :class:`ParamTensor`, whose ``grad`` field is an
additive accumulator zeroed explicitly by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass
class ParamTensor:
    """A named trainable array with an additive gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform init on [-s, s] with s = sqrt(6 / (fan_in + fan_out)).

    For 1-D shapes fan_out is taken as 1.
    """
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_in, fan_out = shape[0], int(np.prod(shape[1:]))
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


# ---------------------------------------------------------------------------
# Forward / backward kernel pairs
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(
    grad_out: np.ndarray, a: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    return grad_out @ b.T, a.T @ grad_out


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Rows may contain -inf entries (masked positions) as long as each row
    has at least one finite entry.
    """
    mx = np.max(m, axis=-1, keepdims=True)
    e = np.exp(m - mx)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    inner = np.sum(grad_out * out, axis=-1, keepdims=True)
    return out * (grad_out - inner)


def layer_norm_rows(
    m: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    out, _ = layer_norm_rows_forward(m, gamma, beta, eps)
    return out


def layer_norm_rows_forward(
    m: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, tuple]:
    """Per-row standardization (population variance) scaled by gamma, beta."""
    mean = m.mean(axis=1, keepdims=True)
    var = m.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (m - mean) * inv_std
    out = xhat * gamma + beta
    return out, (xhat, inv_std, gamma)


def layer_norm_rows_backward(
    grad_out: np.ndarray, cache: tuple
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma = cache
    dbeta = grad_out.sum(axis=0)
    dgamma = (grad_out * xhat).sum(axis=0)
    dxhat = grad_out * gamma
    # standard layer-norm input gradient
    dm = inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dm, dgamma, dbeta


def relu(m: np.ndarray) -> np.ndarray:
    return np.maximum(m, 0.0)


def relu_backward(grad_out: np.ndarray, m: np.ndarray) -> np.ndarray:
    return grad_out * (m > 0.0)


def l2_normalize_rows(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Divide each row by max(its L2 norm, eps); zero rows stay zero."""
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return m / np.maximum(norms, eps)


def l2_normalize_rows_backward(
    grad_out: np.ndarray, m: np.ndarray, eps: float = 1e-12
) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    safe = norms > eps
    n = np.where(safe, norms, 1.0)
    out = m / n
    dm = (grad_out - out * np.sum(out * grad_out, axis=-1, keepdims=True)) / n
    # degenerate rows get zero gradient (subgradient choice for stability)
    return np.where(safe, dm, 0.0)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], float],
    params: Sequence[ParamTensor],
    h: float = 1e-4,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f()`` evaluates the scalar objective from the parameters' current
    values; the analytic gradient must already be accumulated in each
    parameter's ``grad``. Each entry is perturbed by ±h in place and the
    relative error uses denominator max(|analytic|, |numeric|, 1e-6).
    The floor must dominate the cancellation noise of the central
    difference, eps * |f| / (2h) ~ 1e-12 for O(1) objectives at the
    default step; otherwise coordinates whose true derivative is exactly
    zero report that noise as spurious relative error.
    """
    worst = 0.0
    for p in params:
        flat_v = p.value.reshape(-1)
        flat_g = p.grad.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + h
            f_plus = float(f())
            flat_v[i] = orig - h
            f_minus = float(f())
            flat_v[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = flat_g[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
