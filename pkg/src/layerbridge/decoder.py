"""Frozen causal decoder whose attention adds gate-scaled cross-attention.

Every layer computes self-attention over the running sequence plus a
cross-attention read of that layer's fused encoder representation, both
through the same frozen projection weights, summed as SA + g * CA before
re-entering the residual stream. Gates start at exactly zero, so an
untrained model is indistinguishable from the plain decoder; training moves
only the gates (and bridge parameters), never the decoder weights.

The dynamic-gate variant replaces each scalar with a per-position value
squashed through tanh from a tiny linear read of the layer's incoming
hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bridge import FusedKV
from .errors import ConfigError, ContractError, NumericError
from .nn import Linear, attention, causal_bias, padding_bias, glorot

STAGE_TRANSLATION = "translation"
STAGE_TASK = "task"


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 512
    d_dec: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 96
    pad_id: int = 0
    bos_id: int = 1
    sep_id: int = 2
    eos_id: int = 3
    # frozen stand-in init scales; see EncoderConfig for the rationale
    emb_scale: float = 0.5
    pos_scale: float = 0.3
    head_scale: float = 1.5

    def __post_init__(self):
        if self.d_dec % self.n_heads:
            raise ConfigError(f"d_dec {self.d_dec} not divisible by {self.n_heads} heads")
        if self.n_layers < 1:
            raise ConfigError(f"decoder needs at least one layer, got {self.n_layers}")
        if self.emb_scale <= 0 or self.pos_scale <= 0 or self.head_scale <= 0:
            raise ConfigError("init scales must be positive")
        specials = (self.pad_id, self.bos_id, self.sep_id, self.eos_id)
        if len(set(specials)) != 4:
            raise ConfigError(f"special token ids must be distinct, got {specials}")
        for tid in specials:
            if not 0 <= tid < self.vocab_size:
                raise ConfigError(f"special token id {tid} outside vocab of {self.vocab_size}")


class GateVector:
    """One learnable scalar per decoder layer, initialized to exactly zero."""

    def __init__(self, n_layers: int):
        self.values = [
            Tensor(np.zeros(1, dtype=np.float32), requires_grad=True) for _ in range(n_layers)
        ]

    def named_params(self, prefix: str = "gates") -> dict[str, Tensor]:
        return {f"{prefix}.layer{i + 1}": g for i, g in enumerate(self.values)}

    def snapshot(self) -> list[float]:
        return [float(g.data[0]) for g in self.values]


class DynamicGates:
    """Per-layer tanh(linear) gate nets reading the current hidden state.

    Weights and biases start at zero so the initial gate is exactly 0
    everywhere, preserving the smooth-start behaviour of the scalar gates.
    """

    def __init__(self, n_layers: int, d_dec: int):
        self.nets = []
        for _ in range(n_layers):
            self.nets.append(
                {
                    "weight": Tensor(np.zeros((d_dec, 1), dtype=np.float32), requires_grad=True),
                    "bias": Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
                }
            )

    def named_params(self, prefix: str = "gates.dynamic") -> dict[str, Tensor]:
        out = {}
        for i, net in enumerate(self.nets):
            out[f"{prefix}.layer{i + 1}.weight"] = net["weight"]
            out[f"{prefix}.layer{i + 1}.bias"] = net["bias"]
        return out

    def gate_for(self, layer_index: int, hidden: Tensor) -> Tensor:
        """Per-position gate [batch, dec_len, 1] for 1-based ``layer_index``."""
        net = self.nets[layer_index - 1]
        return ad.tanh(ad.add(ad.matmul(hidden, net["weight"]), net["bias"]))

    def snapshot(self) -> list[float]:
        # the constant component of each gate; per-position values vary
        return [float(np.tanh(net["bias"].data[0])) for net in self.nets]


@dataclass
class DecoderState:
    """Forward-pass record: hidden sequences T_0..T_m, the validity mask, and
    per-layer per-token output norms of the two attention paths (the CA norm
    already carries its gate factor)."""

    states: list[Tensor]
    valid: np.ndarray
    sa_norms: list[np.ndarray] = field(default_factory=list)
    ca_norms: list[np.ndarray] = field(default_factory=list)


class Decoder:
    """Pre-norm causal transformer, random-initialized then frozen."""

    def __init__(self, config: DecoderConfig, seed: int = 11):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEC0]))
        c = config
        frozen = dict(requires_grad=False)
        self.tok_emb = Tensor(rng.normal(0, c.emb_scale, size=(c.vocab_size, c.d_dec)).astype(np.float32), **frozen)
        self.pos_emb = Tensor(rng.normal(0, c.pos_scale, size=(c.max_positions, c.d_dec)).astype(np.float32), **frozen)
        self.layers = []
        for _ in range(c.n_layers):
            self.layers.append(
                {
                    "ln1_gain": Tensor(np.ones(c.d_dec, dtype=np.float32), **frozen),
                    "ln1_bias": Tensor(np.zeros(c.d_dec, dtype=np.float32), **frozen),
                    "wq": Tensor(glorot(rng, c.d_dec, c.d_dec), **frozen),
                    "wk": Tensor(glorot(rng, c.d_dec, c.d_dec), **frozen),
                    "wv": Tensor(glorot(rng, c.d_dec, c.d_dec), **frozen),
                    "wo": Tensor(glorot(rng, c.d_dec, c.d_dec), **frozen),
                    "ln2_gain": Tensor(np.ones(c.d_dec, dtype=np.float32), **frozen),
                    "ln2_bias": Tensor(np.zeros(c.d_dec, dtype=np.float32), **frozen),
                    "ff1_w": Tensor(glorot(rng, c.d_dec, c.d_ff), **frozen),
                    "ff1_b": Tensor(np.zeros(c.d_ff, dtype=np.float32), **frozen),
                    "ff2_w": Tensor(glorot(rng, c.d_ff, c.d_dec), **frozen),
                    "ff2_b": Tensor(np.zeros(c.d_dec, dtype=np.float32), **frozen),
                }
            )
        self.final_ln_gain = Tensor(np.ones(c.d_dec, dtype=np.float32), **frozen)
        self.final_ln_bias = Tensor(np.zeros(c.d_dec, dtype=np.float32), **frozen)
        # head columns need unit-order norms: after the final layer norm the
        # hidden state has norm ~sqrt(d_dec), and confident predictions need
        # peak logits well above log(vocab), which glorot columns cannot reach
        self.head = Linear(rng, c.d_dec, c.vocab_size, bias=True, trainable=False)
        self.head.weight.data = rng.normal(
            0, c.head_scale / np.sqrt(c.d_dec), size=(c.d_dec, c.vocab_size)
        ).astype(np.float32)

    def named_params(self, prefix: str = "decoder") -> dict[str, Tensor]:
        out = {f"{prefix}.tok_emb": self.tok_emb, f"{prefix}.pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for key, tensor in layer.items():
                out[f"{prefix}.layer{i}.{key}"] = tensor
        out[f"{prefix}.final_ln.gain"] = self.final_ln_gain
        out[f"{prefix}.final_ln.bias"] = self.final_ln_bias
        out.update(self.head.named_params(f"{prefix}.head"))
        return out

    def embed_tokens(self, tokens: np.ndarray) -> Tensor:
        """Frozen embedding lookup, [batch, length, d_dec]."""
        idx = np.asarray(tokens, dtype=np.int64)
        bad = (idx < 0) | (idx >= self.config.vocab_size)
        if bad.any():
            pos = tuple(map(int, np.argwhere(bad)[0]))
            raise ConfigError(f"token id {idx[pos]} at {pos} outside decoder vocab")
        return Tensor(self.tok_emb.data[idx])

    def forward(
        self,
        t0: Tensor,
        fused: FusedKV | None,
        gates: GateVector | None,
        valid: np.ndarray | None = None,
        dynamic_gates: DynamicGates | None = None,
    ) -> tuple[Tensor, DecoderState]:
        """Run all layers and the output head. Returns (logits, state).

        ``fused=None`` removes cross-attention entirely (self-attention-only
        decoder). Exactly one of ``gates`` / ``dynamic_gates`` drives CA when
        ``fused`` is present.
        """
        c = self.config
        batch, dec_len, d = t0.shape
        if d != c.d_dec:
            raise ConfigError(f"T_0 width {d} != d_dec {c.d_dec}")
        if dec_len > c.max_positions:
            raise ConfigError(f"sequence length {dec_len} exceeds max_positions {c.max_positions}")
        if fused is not None:
            if fused.n_layers != c.n_layers:
                raise ConfigError(
                    f"fused K/V carries {fused.n_layers} layers, decoder has {c.n_layers}"
                )
            if (gates is None) == (dynamic_gates is None):
                raise ConfigError("exactly one gate source must accompany fused K/V")
        if valid is None:
            valid = np.ones((batch, dec_len), dtype=bool)
        sa_bias = causal_bias(dec_len) + padding_bias(valid)
        ca_bias = padding_bias(fused.mask) if fused is not None else None

        x = ad.add(t0, Tensor(self.pos_emb.data[:dec_len][None]))
        state = DecoderState(states=[t0], valid=valid)
        for i, layer in enumerate(self.layers, start=1):
            normed = ad.layer_norm(x, layer["ln1_gain"], layer["ln1_bias"])
            q = ad.matmul(normed, layer["wq"])
            sa = ad.matmul(
                attention(
                    q,
                    ad.matmul(normed, layer["wk"]),
                    ad.matmul(normed, layer["wv"]),
                    c.n_heads,
                    bias=sa_bias,
                ),
                layer["wo"],
            )
            if fused is not None:
                h_k, h_v = fused.pairs[i - 1]
                ca = ad.matmul(
                    attention(
                        q,
                        ad.matmul(h_k, layer["wk"]),
                        ad.matmul(h_v, layer["wv"]),
                        c.n_heads,
                        bias=ca_bias,
                    ),
                    layer["wo"],
                )
                if dynamic_gates is not None:
                    gate = dynamic_gates.gate_for(i, x)
                else:
                    gate = gates.values[i - 1]
                gated = ad.mul(ca, gate)
                x = ad.add(ad.add(x, sa), gated)
                gate_mag = np.abs(gate.data if gate.ndim == 3 else gate.data.reshape(1, 1, 1))
                state.ca_norms.append(
                    (gate_mag * np.linalg.norm(ca.data, axis=-1, keepdims=True)).reshape(batch, dec_len)
                )
            else:
                x = ad.add(x, sa)
                state.ca_norms.append(np.zeros((batch, dec_len)))
            state.sa_norms.append(np.linalg.norm(sa.data, axis=-1))
            normed2 = ad.layer_norm(x, layer["ln2_gain"], layer["ln2_bias"])
            ff = ad.matmul(ad.relu(ad.add(ad.matmul(normed2, layer["ff1_w"]), layer["ff1_b"])), layer["ff2_w"])
            x = ad.add(x, ad.add(ff, layer["ff2_b"]))
            if not np.all(np.isfinite(x.data)):
                raise NumericError(f"non-finite activations leaving decoder layer {i}")
            state.states.append(x)
        final = ad.layer_norm(x, self.final_ln_gain, self.final_ln_bias)
        logits = self.head(final)
        return logits, state


def assemble_input(
    decoder: Decoder,
    stage: str,
    i_map: Tensor | None,
    user_tokens: np.ndarray | None = None,
) -> Tensor:
    """Build the decoder's input embedding sequence T_0 for one stage.

    Translation layout: [embed(bos); soft prompt; embed(sep)]. Task layout
    appends embed(user_tokens). A ``None`` soft prompt (adapter ablated)
    drops that block. Positional embeddings are added inside ``forward``,
    not here. Supervised target embeddings are appended by the trainer after
    assembly; this function never sees them.
    """
    if stage not in (STAGE_TRANSLATION, STAGE_TASK):
        raise ConfigError(f"unknown stage {stage!r}")
    if stage == STAGE_TASK and user_tokens is None:
        raise ContractError("task stage requires user_tokens")
    if i_map is not None:
        batch = i_map.shape[0]
    elif user_tokens is not None:
        batch = np.asarray(user_tokens).shape[0]
    else:
        batch = 1
    c = decoder.config
    bos = decoder.embed_tokens(np.full((batch, 1), c.bos_id, dtype=np.int64))
    sep = decoder.embed_tokens(np.full((batch, 1), c.sep_id, dtype=np.int64))
    parts = [bos]
    if i_map is not None:
        parts.append(i_map)
    parts.append(sep)
    if stage == STAGE_TASK:
        parts.append(decoder.embed_tokens(user_tokens))
    return ad.concat(parts, axis=1)


def ga_layer(decoder: Decoder, layer_index: int, t_prev: Tensor, h_k: Tensor, h_v: Tensor,
             gate: Tensor, enc_valid: np.ndarray | None = None) -> Tensor:
    """One attention-plus-feedforward block in isolation (1-based index).

    Exposed for oracle tests; ``forward`` runs the same computation inline.
    """
    c = decoder.config
    layer = decoder.layers[layer_index - 1]
    batch, dec_len, _ = t_prev.shape
    sa_bias = causal_bias(dec_len)
    ca_bias = padding_bias(enc_valid) if enc_valid is not None else None
    normed = ad.layer_norm(t_prev, layer["ln1_gain"], layer["ln1_bias"])
    q = ad.matmul(normed, layer["wq"])
    sa = ad.matmul(
        attention(q, ad.matmul(normed, layer["wk"]), ad.matmul(normed, layer["wv"]), c.n_heads, bias=sa_bias),
        layer["wo"],
    )
    ca = ad.matmul(
        attention(q, ad.matmul(h_k, layer["wk"]), ad.matmul(h_v, layer["wv"]), c.n_heads, bias=ca_bias),
        layer["wo"],
    )
    x = ad.add(ad.add(t_prev, sa), ad.mul(ca, gate))
    normed2 = ad.layer_norm(x, layer["ln2_gain"], layer["ln2_bias"])
    ff = ad.matmul(ad.relu(ad.add(ad.matmul(normed2, layer["ff1_w"]), layer["ff1_b"])), layer["ff2_w"])
    out = ad.add(x, ad.add(ff, layer["ff2_b"]))
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite activations leaving decoder layer {layer_index}")
    return out


def ga_layer_dynamic(decoder: Decoder, layer_index: int, t_prev: Tensor, h_k: Tensor,
                     h_v: Tensor, dynamic_gates: DynamicGates,
                     enc_valid: np.ndarray | None = None) -> Tensor:
    """Gated block with the per-position tanh gate instead of the scalar."""
    gate = dynamic_gates.gate_for(layer_index, t_prev)
    return ga_layer(decoder, layer_index, t_prev, h_k, h_v, gate, enc_valid)


def decoder_forward(decoder: Decoder, t0: Tensor, fused: FusedKV | None, gates: GateVector | None,
                    valid: np.ndarray | None = None,
                    dynamic_gates: DynamicGates | None = None) -> tuple[Tensor, DecoderState]:
    return decoder.forward(t0, fused, gates, valid=valid, dynamic_gates=dynamic_gates)


def generate(
    decoder: Decoder,
    prompt: Tensor,
    fused: FusedKV | None,
    gates: GateVector | None,
    max_new_tokens: int,
    dynamic_gates: DynamicGates | None = None,
) -> list[int]:
    """Greedy decoding from an assembled prompt [1, P, d_dec].

    Appends the argmax token's embedding and re-runs the stack each step (no
    KV cache at this scale). Stops at the end marker or the budget; the end
    marker itself is not returned.
    """
    if max_new_tokens < 1:
        raise ContractError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
    if prompt.shape[0] != 1:
        raise ContractError(f"generate works on a single sequence, got batch {prompt.shape[0]}")
    c = decoder.config
    out: list[int] = []
    t0 = prompt
    for _ in range(max_new_tokens):
        if t0.shape[1] >= c.max_positions:
            break
        logits, _ = decoder.forward(t0, fused, gates, dynamic_gates=dynamic_gates)
        next_id = int(np.argmax(logits.data[0, -1]))
        if next_id == c.eos_id:
            break
        out.append(next_id)
        t0 = ad.concat([t0, decoder.embed_tokens(np.array([[next_id]]))], axis=1)
    return out
