"""Shared building blocks: linear maps, layer-norm parameters, attention.

Modules here are thin parameter containers. They expose ``named_params`` so
owners can compose flat ``{name: Tensor}`` dictionaries for the optimizer
and the checkpoint writer; nothing registers itself globally.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Linear:
    """y = x @ W (+ b). Weight is [d_in, d_out]."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 bias: bool = True, trainable: bool = True, dtype=np.float32):
        self.weight = Tensor(glorot(rng, d_in, d_out, dtype), requires_grad=trainable)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


class LayerNormParams:
    def __init__(self, d: int, trainable: bool = True, dtype=np.float32):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=trainable)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, S, D] -> [B, h, S, D/h]."""
    b, s, d = x.shape
    if d % n_heads:
        raise ShapeError(f"model width {d} not divisible by {n_heads} heads")
    return ad.transpose(ad.reshape(x, (b, s, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, h, S, D/h] -> [B, S, D]."""
    b, h, s, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over pre-projected q/k/v, [B, S, D] each.

    ``bias`` is an additive mask broadcastable to [B, 1, S_q, S_k]; blocked
    slots carry a large negative constant rather than -inf so fully blocked
    rows stay finite.
    """
    qh = split_heads(q, n_heads)
    kh = split_heads(k, n_heads)
    vh = split_heads(v, n_heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), scale)
    if bias is not None:
        scores = ad.add(scores, Tensor(np.asarray(bias, dtype=scores.data.dtype)))
    weights = ad.softmax(scores, axis=-1)
    return merge_heads(ad.matmul(weights, vh))


def causal_bias(s: int, dtype=np.float32) -> np.ndarray:
    """[1, 1, S, S] additive mask hiding future positions."""
    mask = np.triu(np.ones((s, s), dtype=bool), k=1)
    return np.where(mask, np.asarray(-1e9, dtype=dtype), np.asarray(0.0, dtype=dtype))[None, None]


def padding_bias(valid: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[B, S_k] validity -> [B, 1, 1, S_k] additive key mask."""
    blocked = ~np.asarray(valid, dtype=bool)
    return np.where(blocked, np.asarray(-1e9, dtype=dtype), np.asarray(0.0, dtype=dtype))[:, None, None, :]
