"""Reference numpy implementations of the hot numeric kernels.

This is the fallback lane: tsgen.nn.kernels re-exports either these
functions or their compiled equivalents from _ckernels. Both lanes
implement the same math with the same signatures; only speed differs.

Conventions: forward functions return whatever the matching backward
needs (saved statistics included), arrays keep their input dtype, and
nothing here touches global state.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu_forward(x: np.ndarray) -> np.ndarray:
    """Exact (erf-form) smooth gating: x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return grad_out * (cdf + x * pdf)


def layer_norm_forward(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalizes the last axis to zero mean, unit variance, then affine.

    Returns (out, mean, rstd); mean/rstd keep a trailing singleton axis
    so the backward pass can broadcast them directly.
    """
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    out = (x - mean) * rstd * gain + bias
    return out, mean, rstd


def layer_norm_backward(
    x: np.ndarray,
    gain: np.ndarray,
    mean: np.ndarray,
    rstd: np.ndarray,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat = (x - mean) * rstd
    gxhat = grad_out * gain
    grad_x = rstd * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(x.ndim - 1))
    grad_gain = (grad_out * xhat).sum(axis=lead)
    grad_bias = grad_out.sum(axis=lead)
    return grad_x, grad_gain, grad_bias


def causal_softmax_forward(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with key positions > query masked out.

    Masked logits are set to -inf before the exp, so masked entries
    contribute exactly 0 and outputs at position j are bitwise
    independent of inputs at positions > j.
    """
    n = scores.shape[-1]
    if scores.shape[-2] != n:
        raise ValueError(f"causal softmax expects square last axes, got {scores.shape}")
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    shifted = np.where(mask, float("-inf"), scores)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def causal_softmax_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # masked entries have probs == 0, which zeroes their gradient too
    inner = (probs * grad_out).sum(axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
    bias_corr1: float,
    bias_corr2: float,
) -> None:
    """One decoupled-weight-decay moment update, in place on all buffers."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    if weight_decay != 0.0:
        param *= 1.0 - lr * weight_decay
    param -= lr * (m / bias_corr1) / (np.sqrt(v / bias_corr2) + eps)
