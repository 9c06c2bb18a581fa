"""Trainable bridge between the frozen encoder and the frozen decoder.

Two components. The adapter maps the encoder's final state position-wise
into decoder width, producing the soft prompt spliced into the decoder's
input. The layer-wise aligner mixes the earlier encoder states (0..n-1 by
default) with one learned softmax weighting per decoder layer, then pushes
the mixture through a fusion network shared across decoder layers to
produce that layer's cross-attention keys and values.

Encoder states arrive as read-only numpy arrays; they enter the graph as
constants, so gradients reach only the bridge's own parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import LayerStack
from .errors import ConfigError, ContractError
from .nn import Linear

SUBSET_KINDS = ("first", "middle", "last", "last_hidden", "average")


@dataclass(frozen=True)
class LayerSubset:
    """Restriction of the aligner's mixing range.

    ``indices`` select encoder states (0 = embeddings, n = final layer).
    ``frozen_uniform`` bypasses the learned weighting with constant 1/k,
    which is how the plain-average variant is wired.
    """

    indices: tuple[int, ...]
    frozen_uniform: bool = False

    def __post_init__(self):
        if not self.indices:
            raise ConfigError("layer subset must be nonempty")
        if len(set(self.indices)) != len(self.indices):
            raise ConfigError(f"layer subset has duplicates: {self.indices}")


def subset_from_spec(spec: str, n_layers: int) -> LayerSubset:
    """Parse a subset spec against an encoder with states 0..n_layers.

    Accepted forms: ``first:k``, ``middle:k``, ``last:k``, ``last_hidden``,
    ``average``, or an explicit comma list like ``0,2,5``. Named windows span
    the full state list (``last:k`` ends at the final state); ``average`` is
    a frozen-uniform mixture over all states.
    """
    n_states = n_layers + 1
    spec = spec.strip()
    if spec == "last_hidden":
        return LayerSubset(indices=(n_layers,))
    if spec == "average":
        return LayerSubset(indices=tuple(range(n_states)), frozen_uniform=True)
    if ":" in spec:
        kind, _, count = spec.partition(":")
        try:
            k = int(count)
        except ValueError:
            raise ConfigError(f"bad subset count in {spec!r}") from None
        if not 1 <= k <= n_states:
            raise ConfigError(f"subset size {k} outside 1..{n_states}")
        if kind == "first":
            return LayerSubset(indices=tuple(range(k)))
        if kind == "middle":
            start = (n_states - k) // 2
            return LayerSubset(indices=tuple(range(start, start + k)))
        if kind == "last":
            return LayerSubset(indices=tuple(range(n_states - k, n_states)))
        raise ConfigError(f"unknown subset kind {kind!r}; expected one of {SUBSET_KINDS}")
    try:
        indices = tuple(int(tok) for tok in spec.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse layer subset {spec!r}") from None
    for idx in indices:
        if not 0 <= idx <= n_layers:
            raise ConfigError(f"layer index {idx} outside 0..{n_layers}")
    return LayerSubset(indices=indices)


class Adapter:
    """Position-wise map from encoder width to decoder width over the final
    encoder state. The default is a single linear; the deeper variant inserts
    an encoder-width linear and a SiLU in front of it."""

    def __init__(self, rng: np.random.Generator, d_enc: int, d_dec: int, deep: bool = False):
        self.d_enc = d_enc
        self.d_dec = d_dec
        self.deep = deep
        self.pre = Linear(rng, d_enc, d_enc) if deep else None
        self.proj = Linear(rng, d_enc, d_dec)

    def __call__(self, final_state: Tensor) -> Tensor:
        h = final_state
        if self.pre is not None:
            h = ad.silu(self.pre(h))
        return self.proj(h)

    def named_params(self, prefix: str = "adapter") -> dict[str, Tensor]:
        out = {}
        if self.pre is not None:
            out.update(self.pre.named_params(f"{prefix}.pre"))
        out.update(self.proj.named_params(f"{prefix}.proj"))
        return out


def adapt(adapter: Adapter, stack: LayerStack) -> Tensor:
    """Soft prompt [batch, src_len, d_dec] from the final encoder state."""
    final = stack.final
    if final.shape[-1] != adapter.d_enc:
        raise ConfigError(
            f"adapter expects encoder width {adapter.d_enc}, stack carries {final.shape[-1]}"
        )
    return adapter(Tensor(final))


@dataclass
class FusedKV:
    """Per-decoder-layer cross-attention inputs: m (key, value) pairs, each
    [batch, src_len, d_dec], plus the source validity mask."""

    pairs: list[tuple[Tensor, Tensor]]
    mask: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.pairs)


class LayerWiseAligner:
    """Learned per-decoder-layer mixtures over encoder states.

    One logit row per decoder layer; a row's softmax weights the mixing
    range (states 0..n-1 unless a subset overrides it). Logit storage covers
    all n+1 states so explicit subsets can reach the final state, but the
    default path never reads its column. The mixed sequence runs through
    linear -> ReLU -> linear into decoder width; with ``separate_kv`` the
    second linear is duplicated into distinct key and value heads.
    """

    def __init__(self, rng: np.random.Generator, n_enc_layers: int, n_dec_layers: int,
                 d_enc: int, d_hidden: int, d_dec: int, separate_kv: bool = False):
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.d_enc = d_enc
        self.mixing_logits = Tensor(
            np.zeros((n_dec_layers, n_enc_layers + 1), dtype=np.float32), requires_grad=True
        )
        self.fuse_in = Linear(rng, d_enc, d_hidden)
        self.k_head = Linear(rng, d_hidden, d_dec)
        self.v_head = Linear(rng, d_hidden, d_dec) if separate_kv else None

    def named_params(self, prefix: str = "aligner") -> dict[str, Tensor]:
        out = {f"{prefix}.mixing_logits": self.mixing_logits}
        out.update(self.fuse_in.named_params(f"{prefix}.fuse_in"))
        out.update(self.k_head.named_params(f"{prefix}.k_head"))
        if self.v_head is not None:
            out.update(self.v_head.named_params(f"{prefix}.v_head"))
        return out

    def _mix(self, stack: LayerStack, layer_index: int, subset: LayerSubset | None) -> Tensor:
        if not 1 <= layer_index <= self.n_dec_layers:
            raise ContractError(
                f"decoder layer index {layer_index} outside 1..{self.n_dec_layers}"
            )
        if stack.n_layers != self.n_enc_layers:
            raise ConfigError(
                f"aligner built for {self.n_enc_layers} encoder layers, stack has {stack.n_layers}"
            )
        indices = tuple(range(self.n_enc_layers)) if subset is None else subset.indices
        for idx in indices:
            if not 0 <= idx <= self.n_enc_layers:
                raise ConfigError(f"layer index {idx} outside 0..{self.n_enc_layers}")
        chosen = [stack.states[j] for j in indices]
        batch, src_len, d_enc = chosen[0].shape
        flat = np.stack([h.reshape(-1) for h in chosen], axis=0)
        support = Tensor(flat)  # [k, batch*src_len*d_enc], constant
        if subset is not None and subset.frozen_uniform:
            weights = Tensor(np.full((1, len(indices)), 1.0 / len(indices), dtype=np.float32))
        else:
            row = ad.take(self.mixing_logits, [layer_index - 1], axis=0)
            cols = ad.take(row, list(indices), axis=1)
            weights = ad.softmax(cols, axis=-1)
        mixed = ad.matmul(weights, support)
        return ad.reshape(mixed, (batch, src_len, d_enc))

    def fuse_one(self, stack: LayerStack, layer_index: int,
                 subset: LayerSubset | None = None) -> tuple[Tensor, Tensor]:
        mixed = self._mix(stack, layer_index, subset)
        hidden = ad.relu(self.fuse_in(mixed))
        k = self.k_head(hidden)
        v = self.v_head(hidden) if self.v_head is not None else k
        return k, v

    def fuse_all(self, stack: LayerStack, subset: LayerSubset | None = None) -> FusedKV:
        pairs = [self.fuse_one(stack, i, subset) for i in range(1, self.n_dec_layers + 1)]
        return FusedKV(pairs=pairs, mask=stack.mask)


def fuse(aligner: LayerWiseAligner, stack: LayerStack, layer_index: int) -> tuple[Tensor, Tensor]:
    """Fused (K, V) for one decoder layer from states 0..n-1. 1-based index."""
    return aligner.fuse_one(stack, layer_index, subset=None)


def fuse_subset(aligner: LayerWiseAligner, stack: LayerStack, layer_index: int,
                subset: LayerSubset) -> tuple[Tensor, Tensor]:
    """As ``fuse`` but mixing only over ``subset``'s states (0..n allowed)."""
    return aligner.fuse_one(stack, layer_index, subset=subset)


def aligner_weight_matrix(aligner: LayerWiseAligner) -> np.ndarray:
    """Softmax of each decoder layer's logits over the default mixing range:
    an [m, n] matrix whose rows sum to 1, uniform 1/n at init."""
    logits = aligner.mixing_logits.data[:, : aligner.n_enc_layers].astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
