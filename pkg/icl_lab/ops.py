"""
Forward/backward primitives for the toy transformer.

Every forward returns what its backward needs; backward functions are
hand-derived and checked against central finite differences in gradcheck.py.
Shapes follow the leading-batch convention (..., T, d); dtype follows the input.
"""
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# ==============================================================================
# LINEAR
# ==============================================================================

def linear(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    return x @ W


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray,
                    need_dW: bool = True) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    dx = dy @ W.T
    if not need_dW:
        return dx, None
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    return dx, dW


# ==============================================================================
# RMSNORM
# ==============================================================================

@dataclass
class NormCache:
    x: np.ndarray
    inv: np.ndarray
    g: np.ndarray


def rmsnorm(x: np.ndarray, g: np.ndarray, eps: float) -> Tuple[np.ndarray, NormCache]:
    # zero rows come out as exactly zero: eps keeps inv finite
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * g, NormCache(x=x, inv=inv, g=g)


def rmsnorm_backward(dy: np.ndarray, cache: NormCache,
                     need_dg: bool = True) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    x, inv, g = cache.x, cache.inv, cache.g
    dxhat = dy * g
    dx = inv * dxhat - x * inv ** 3 * np.mean(dxhat * x, axis=-1, keepdims=True)
    if not need_dg:
        return dx, None
    dg = np.sum((dy * x * inv).reshape(-1, x.shape[-1]), axis=0)
    return dx, dg


# ==============================================================================
# GELU (tanh form)
# ==============================================================================

def gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + np.tanh(GELU_C * (u + GELU_A * u ** 3)))


def gelu_backward(da: np.ndarray, u: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (u + GELU_A * u ** 3))
    return da * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u))


# ==============================================================================
# SOFTMAX / CROSS-ENTROPY
# ==============================================================================

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row token cross-entropy for (N, V) logits; returns (losses, probs)"""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    rows = np.arange(logits.shape[0])
    losses = lse - shifted[rows, targets]
    return losses, np.exp(shifted - lse[:, None])


def cross_entropy_backward(probs: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """d(sum_i w_i * loss_i)/d logits"""
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), targets] -= 1.0
    return grad * weights[:, None].astype(probs.dtype)


# ==============================================================================
# MULTI-HEAD ATTENTION
# ==============================================================================

def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def self_only_row(mask: np.ndarray, position: int) -> np.ndarray:
    """Copy of mask where `position` may attend only to itself"""
    blocked = mask.copy()
    blocked[position, :] = False
    blocked[position, position] = True
    return blocked


@dataclass
class AttnCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    z: np.ndarray
    head_mask: Optional[np.ndarray]
    scale: float


def _split_heads(a: np.ndarray, n_heads: int) -> np.ndarray:
    B, T, d = a.shape
    return a.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    B, H, T, dh = a.shape
    return a.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def attention(x: np.ndarray, W_Q: np.ndarray, W_K: np.ndarray, W_V: np.ndarray, W_O: np.ndarray,
              n_heads: int, mask: np.ndarray,
              head_mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, AttnCache]:
    """x: (B, T, d); mask: (T, T) bool, True where attention is allowed"""
    d = x.shape[-1]
    scale = 1.0 / math.sqrt(d // n_heads)
    q = _split_heads(x @ W_Q, n_heads)
    k = _split_heads(x @ W_K, n_heads)
    v = _split_heads(x @ W_V, n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores = np.where(mask[None, None], scores, -np.inf)
    probs = softmax(scores)
    z = _merge_heads(probs @ v)
    if head_mask is not None:
        z = z * head_mask
    return z @ W_O, AttnCache(x=x, q=q, k=k, v=v, probs=probs, z=z, head_mask=head_mask, scale=scale)


def attention_backward(dout: np.ndarray, cache: AttnCache, W_Q: np.ndarray, W_K: np.ndarray,
                       W_V: np.ndarray, W_O: np.ndarray,
                       need_param_grads: bool = True) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    n_heads = cache.q.shape[1]
    dz = dout @ W_O.T
    grads: Dict[str, np.ndarray] = {}
    if need_param_grads:
        d = dout.shape[-1]
        grads["W_O"] = cache.z.reshape(-1, d).T @ dout.reshape(-1, d)
    if cache.head_mask is not None:
        dz = dz * cache.head_mask
    dzh = _split_heads(dz, n_heads)
    dprobs = dzh @ cache.v.transpose(0, 1, 3, 2)
    dv = cache.probs.transpose(0, 1, 3, 2) @ dzh
    dscores = softmax_backward(dprobs, cache.probs) * cache.scale
    dq = dscores @ cache.k
    dk = dscores.transpose(0, 1, 3, 2) @ cache.q

    dQ, dK, dV = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dx = dQ @ W_Q.T + dK @ W_K.T + dV @ W_V.T
    if need_param_grads:
        x2 = cache.x.reshape(-1, cache.x.shape[-1])
        grads["W_Q"] = x2.T @ dQ.reshape(x2.shape[0], -1)
        grads["W_K"] = x2.T @ dK.reshape(x2.shape[0], -1)
        grads["W_V"] = x2.T @ dV.reshape(x2.shape[0], -1)
    return dx, grads
