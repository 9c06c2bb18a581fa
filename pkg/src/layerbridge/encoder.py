"""Frozen bidirectional transformer encoder exposing every layer's states.

The encoder stands in for a large pretrained multilingual model: weights are
random, seed-pinned, and never trained. Forward runs in plain numpy (no tape
interaction is possible), and the returned states are marked read-only so
downstream code cannot mutate what the frozen contract checksums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError, InputError
from .nn import glorot


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 512
    d_enc: int = 64
    n_layers: int = 6
    n_heads: int = 4
    d_ff: int = 128
    max_positions: int = 64
    # init scales of the frozen stand-in weights; position needs to be well
    # represented in the states or downstream alignment cannot route by it
    emb_scale: float = 0.5
    pos_scale: float = 0.3

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be positive, got {self.vocab_size}")
        if self.n_layers < 1:
            raise ConfigError(f"encoder needs at least one layer, got {self.n_layers}")
        if self.d_enc % self.n_heads:
            raise ConfigError(f"d_enc {self.d_enc} not divisible by {self.n_heads} heads")
        if self.emb_scale <= 0 or self.pos_scale <= 0:
            raise ConfigError("embedding init scales must be positive")


@dataclass
class LayerStack:
    """All n+1 encoder states for one batch: index 0 is the embedding output,
    index i the output of layer i. Arrays are read-only; the source mask marks
    real (non-pad) positions."""

    states: list[np.ndarray]
    mask: np.ndarray

    def __post_init__(self):
        first = self.states[0].shape
        for i, h in enumerate(self.states):
            if h.shape != first:
                raise ContractError(f"layer state {i} shape {h.shape} != {first}")
            h.flags.writeable = False
        self.mask = np.asarray(self.mask, dtype=bool)
        self.mask.flags.writeable = False

    @property
    def n_layers(self) -> int:
        return len(self.states) - 1

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def support(self) -> list[np.ndarray]:
        """Layers 0..n-1, the fusion inputs. Never includes the final state."""
        return self.states[:-1]


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


class Encoder:
    """Pre-norm encoder; H_0 is token+position embeddings, H_i the output of
    layer i with no extra final normalization."""

    def __init__(self, config: EncoderConfig, seed: int = 7):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE11C]))
        c = config
        frozen = dict(requires_grad=False)
        self.tok_emb = Tensor(rng.normal(0, c.emb_scale, size=(c.vocab_size, c.d_enc)).astype(np.float32), **frozen)
        self.pos_emb = Tensor(rng.normal(0, c.pos_scale, size=(c.max_positions, c.d_enc)).astype(np.float32), **frozen)
        self.layers = []
        for _ in range(c.n_layers):
            layer = {
                "ln1_gain": Tensor(np.ones(c.d_enc, dtype=np.float32), **frozen),
                "ln1_bias": Tensor(np.zeros(c.d_enc, dtype=np.float32), **frozen),
                "wq": Tensor(glorot(rng, c.d_enc, c.d_enc), **frozen),
                "wk": Tensor(glorot(rng, c.d_enc, c.d_enc), **frozen),
                "wv": Tensor(glorot(rng, c.d_enc, c.d_enc), **frozen),
                "wo": Tensor(glorot(rng, c.d_enc, c.d_enc), **frozen),
                "ln2_gain": Tensor(np.ones(c.d_enc, dtype=np.float32), **frozen),
                "ln2_bias": Tensor(np.zeros(c.d_enc, dtype=np.float32), **frozen),
                "ff1_w": Tensor(glorot(rng, c.d_enc, c.d_ff), **frozen),
                "ff1_b": Tensor(np.zeros(c.d_ff, dtype=np.float32), **frozen),
                "ff2_w": Tensor(glorot(rng, c.d_ff, c.d_enc), **frozen),
                "ff2_b": Tensor(np.zeros(c.d_enc, dtype=np.float32), **frozen),
            }
            self.layers.append(layer)

    def named_params(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out = {f"{prefix}.tok_emb": self.tok_emb, f"{prefix}.pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for key, tensor in layer.items():
                out[f"{prefix}.layer{i}.{key}"] = tensor
        return out

    def forward(self, tokens: np.ndarray, mask: np.ndarray | None = None) -> LayerStack:
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise InputError(f"encoder tokens must be [batch, src_len], got shape {tokens.shape}")
        batch, src_len = tokens.shape
        if src_len > c.max_positions:
            raise InputError(f"sequence length {src_len} exceeds max_positions {c.max_positions}")
        bad = (tokens < 0) | (tokens >= c.vocab_size)
        if bad.any():
            b, s = map(int, np.argwhere(bad)[0])
            raise InputError(
                f"token id {tokens[b, s]} at batch {b}, position {s} outside vocab of {c.vocab_size}"
            )
        if mask is None:
            mask = np.ones((batch, src_len), dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != tokens.shape:
                raise InputError(f"mask shape {mask.shape} != tokens shape {tokens.shape}")

        h = self.tok_emb.data[tokens] + self.pos_emb.data[:src_len][None]
        # key-side padding bias: pads never attend into real positions
        key_bias = np.where(~mask, np.float32(-1e9), np.float32(0.0))[:, None, None, :]
        states = [h.copy()]
        n_heads = c.n_heads
        d_head = c.d_enc // n_heads
        for layer in self.layers:
            normed = _layer_norm_np(h, layer["ln1_gain"].data, layer["ln1_bias"].data)
            q = normed @ layer["wq"].data
            k = normed @ layer["wk"].data
            v = normed @ layer["wv"].data

            def heads(x):
                return x.reshape(batch, src_len, n_heads, d_head).transpose(0, 2, 1, 3)

            scores = heads(q) @ heads(k).transpose(0, 1, 3, 2) / np.sqrt(d_head)
            weights = _softmax_np(scores + key_bias, axis=-1)
            attended = (weights @ heads(v)).transpose(0, 2, 1, 3).reshape(batch, src_len, c.d_enc)
            h = h + attended @ layer["wo"].data
            normed = _layer_norm_np(h, layer["ln2_gain"].data, layer["ln2_bias"].data)
            h = h + np.maximum(normed @ layer["ff1_w"].data + layer["ff1_b"].data, 0) @ layer["ff2_w"].data + layer["ff2_b"].data
            states.append(h.copy())
        return LayerStack(states=states, mask=mask)


def encoder_forward(encoder: Encoder, tokens, mask=None) -> LayerStack:
    return encoder.forward(tokens, mask)


@dataclass
class SimilarityProfile:
    """Mean per-position cosine of each layer against a reference layer.

    ``values[i]`` averages cosine(H_i[pos], H_ref[pos]) over real (non-pad)
    positions; positions where either vector is exactly zero are skipped and
    counted per layer in ``skipped``."""

    values: np.ndarray
    skipped: np.ndarray
    reference: str

    @property
    def total_skipped(self) -> int:
        return int(self.skipped.sum())


def layer_similarity_profile(stack: LayerStack, reference: str = "embedding") -> SimilarityProfile:
    if reference not in ("embedding", "last"):
        raise ConfigError(f"reference must be 'embedding' or 'last', got {reference!r}")
    if not stack.states:
        raise ContractError("empty layer stack")
    ref = stack.states[0] if reference == "embedding" else stack.states[-1]
    valid = stack.mask
    n_states = len(stack.states)
    values = np.zeros(n_states)
    skipped = np.zeros(n_states, dtype=np.int64)
    ref_norm = np.linalg.norm(ref.astype(np.float64), axis=-1)
    for i, h in enumerate(stack.states):
        h_norm = np.linalg.norm(h.astype(np.float64), axis=-1)
        usable = valid & (h_norm > 0) & (ref_norm > 0)
        skipped[i] = int((valid & ((h_norm == 0) | (ref_norm == 0))).sum())
        if not usable.any():
            values[i] = np.nan
            continue
        dots = np.sum(h.astype(np.float64) * ref.astype(np.float64), axis=-1)
        cos = dots[usable] / (h_norm[usable] * ref_norm[usable])
        values[i] = float(cos.mean())
    return SimilarityProfile(values=values, skipped=skipped, reference=reference)
