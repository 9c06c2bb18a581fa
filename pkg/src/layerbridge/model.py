"""End-to-end model: frozen encoder -> trainable bridge -> frozen decoder.

Handles batch assembly with per-example packing: each example's decoder
sequence is [bos; soft prompt; sep; user tokens?; teacher-forced targets]
built at its own true lengths, then right-padded so padding never sits
between real tokens. Ablation flags rewire the forward pass itself, so
"component removed" means the corresponding encoder states are genuinely
unused, not merely down-weighted.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bridge import Adapter, FusedKV, LayerSubset, LayerWiseAligner, adapt, subset_from_spec
from .decoder import (
    STAGE_TASK,
    STAGE_TRANSLATION,
    Decoder,
    DecoderConfig,
    DecoderState,
    DynamicGates,
    GateVector,
    generate,
)
from .encoder import Encoder, EncoderConfig, LayerStack
from .errors import ConfigError, ContractError

# frozen backbones are seed-pinned independently of the training seed so
# every run trains against the same random encoder and decoder
ENCODER_SEED = 7
DECODER_SEED = 11


@dataclass(frozen=True)
class BridgeSettings:
    d_hidden: int = 96
    deep_adapter: bool = False
    separate_kv: bool = False


@dataclass(frozen=True)
class AblationFlags:
    no_adapter: bool = False
    no_aligner: bool = False
    no_llm_input: bool = False
    skip_stage1: bool = False
    skip_stage2: bool = False
    dynamic_gate: bool = False
    layer_subset: str | None = None

    def active(self) -> list[str]:
        out = [k for k in ("no_adapter", "no_aligner", "no_llm_input", "skip_stage1",
                           "skip_stage2", "dynamic_gate") if getattr(self, k)]
        if self.layer_subset:
            out.append(f"layer_subset={self.layer_subset}")
        return out


@dataclass
class PackedBatch:
    """One assembled training batch: T_0, validity, flattened supervision.

    ``user_spans`` holds each example's (start, length) of raw input-token
    positions inside T_0 — (0, 0) when the layout carries none."""

    t0: Tensor
    valid: np.ndarray
    labels: np.ndarray
    loss_mask: np.ndarray
    prompt_lens: list[int]
    user_spans: list[tuple[int, int]]


class BridgedModel:
    def __init__(
        self,
        enc_config: EncoderConfig,
        dec_config: DecoderConfig,
        settings: BridgeSettings = BridgeSettings(),
        ablations: AblationFlags = AblationFlags(),
        seed: int = 0,
    ):
        if ablations.no_adapter and ablations.no_aligner:
            raise ConfigError("no_adapter + no_aligner leaves the decoder blind to the encoder")
        self.enc_config = enc_config
        self.dec_config = dec_config
        self.settings = settings
        self.ablations = ablations
        self.seed = seed
        self.encoder = Encoder(enc_config, seed=ENCODER_SEED)
        self.decoder = Decoder(dec_config, seed=DECODER_SEED)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB21D]))
        self.adapter = Adapter(rng, enc_config.d_enc, dec_config.d_dec, deep=settings.deep_adapter)
        self.aligner = LayerWiseAligner(
            rng,
            n_enc_layers=enc_config.n_layers,
            n_dec_layers=dec_config.n_layers,
            d_enc=enc_config.d_enc,
            d_hidden=settings.d_hidden,
            d_dec=dec_config.d_dec,
            separate_kv=settings.separate_kv,
        )
        self.gates = GateVector(dec_config.n_layers)
        self.dynamic_gates = DynamicGates(dec_config.n_layers, dec_config.d_dec) if ablations.dynamic_gate else None
        self.subset: LayerSubset | None = (
            subset_from_spec(ablations.layer_subset, enc_config.n_layers)
            if ablations.layer_subset
            else None
        )

    # ------------------------------------------------------------------
    # parameter plumbing
    # ------------------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder.named_params("encoder"))
        out.update(self.decoder.named_params("decoder"))
        out.update(self.adapter.named_params("adapter"))
        out.update(self.aligner.named_params("aligner"))
        out.update(self.gates.named_params("gates"))
        if self.dynamic_gates is not None:
            out.update(self.dynamic_gates.named_params("gates.dynamic"))
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        """The bridge parameters the optimizer may touch, after ablations."""
        out: dict[str, Tensor] = {}
        if not self.ablations.no_adapter:
            out.update(self.adapter.named_params("adapter"))
        if not self.ablations.no_aligner:
            out.update(self.aligner.named_params("aligner"))
            if self.ablations.dynamic_gate:
                out.update(self.dynamic_gates.named_params("gates.dynamic"))
            else:
                out.update(self.gates.named_params("gates"))
        return out

    def frozen_digest(self) -> str:
        """SHA-256 over every encoder and decoder parameter payload."""
        digest = hashlib.sha256()
        for name, tensor in sorted(self.named_params().items()):
            if not (name.startswith("encoder.") or name.startswith("decoder.")):
                continue
            digest.update(name.encode())
            digest.update(str(tensor.shape).encode())
            digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()

    # ------------------------------------------------------------------
    # forward paths
    # ------------------------------------------------------------------

    def encode_sources(self, src_seqs: list[np.ndarray]) -> LayerStack:
        pad = self.dec_config.pad_id
        width = max(len(s) for s in src_seqs)
        batch = len(src_seqs)
        tokens = np.full((batch, width), pad, dtype=np.int64)
        mask = np.zeros((batch, width), dtype=bool)
        for i, seq in enumerate(src_seqs):
            tokens[i, : len(seq)] = seq
            mask[i, : len(seq)] = True
        return self.encoder.forward(tokens, mask)

    def bridge_outputs(self, stack: LayerStack) -> tuple[Tensor | None, FusedKV | None]:
        i_map = None if self.ablations.no_adapter else adapt(self.adapter, stack)
        fused = None if self.ablations.no_aligner else self.aligner.fuse_all(stack, self.subset)
        return i_map, fused

    def _pack(
        self,
        stack: LayerStack,
        i_map: Tensor | None,
        stage: str,
        src_seqs: list[np.ndarray],
        tgt_seqs: list[np.ndarray] | None,
    ) -> PackedBatch:
        """Per-example assembly then right-padding to the batch maximum."""
        dec = self.decoder
        c = self.dec_config
        batch = len(src_seqs)
        use_user = stage == STAGE_TASK and not self.ablations.no_llm_input
        bos = dec.embed_tokens(np.array([[c.bos_id]]))
        sep = dec.embed_tokens(np.array([[c.sep_id]]))

        rows: list[list[Tensor]] = []
        prompt_lens: list[int] = []
        user_spans: list[tuple[int, int]] = []
        lengths: list[int] = []
        for e in range(batch):
            p = len(src_seqs[e])
            parts = [bos]
            if i_map is not None:
                parts.append(ad.narrow(ad.narrow(i_map, 0, e, 1), 1, 0, p))
            parts.append(sep)
            frame_len = 1 + (p if i_map is not None else 0) + 1
            if use_user:
                parts.append(dec.embed_tokens(src_seqs[e][None, :]))
                user_spans.append((frame_len, p))
            else:
                user_spans.append((0, 0))
            prompt_len = frame_len + (p if use_user else 0)
            if tgt_seqs is not None and len(tgt_seqs[e]):
                parts.append(dec.embed_tokens(tgt_seqs[e][None, :]))
            rows.append(parts)
            prompt_lens.append(prompt_len)
            lengths.append(prompt_len + (len(tgt_seqs[e]) if tgt_seqs is not None else 0))

        width = max(lengths)
        if width > c.max_positions:
            raise ConfigError(f"assembled length {width} exceeds max_positions {c.max_positions}")
        valid = np.zeros((batch, width), dtype=bool)
        labels = np.zeros((batch, width), dtype=np.int64)
        loss_mask = np.zeros((batch, width), dtype=bool)
        padded_rows = []
        for e in range(batch):
            deficit = width - lengths[e]
            parts = rows[e]
            if deficit:
                parts = parts + [dec.embed_tokens(np.full((1, deficit), c.pad_id, dtype=np.int64))]
            padded_rows.append(ad.concat(parts, axis=1) if len(parts) > 1 else parts[0])
            valid[e, : lengths[e]] = True
            if tgt_seqs is not None:
                tgt = tgt_seqs[e]
                p0 = prompt_lens[e] - 1
                for j, tok in enumerate(tgt):
                    labels[e, p0 + j] = tok
                    loss_mask[e, p0 + j] = True
                labels[e, p0 + len(tgt)] = c.eos_id
                loss_mask[e, p0 + len(tgt)] = True
        t0 = ad.concat(padded_rows, axis=0) if batch > 1 else padded_rows[0]
        return PackedBatch(
            t0=t0,
            valid=valid,
            labels=labels,
            loss_mask=loss_mask,
            prompt_lens=prompt_lens,
            user_spans=user_spans,
        )

    def forward_batch(
        self,
        stage: str,
        src_seqs: list[np.ndarray],
        tgt_seqs: list[np.ndarray] | None = None,
    ) -> tuple[Tensor, DecoderState, PackedBatch]:
        """Logits over the packed batch; targets are teacher-forced when given."""
        if stage not in (STAGE_TRANSLATION, STAGE_TASK):
            raise ConfigError(f"unknown stage {stage!r}")
        stack = self.encode_sources(src_seqs)
        i_map, fused = self.bridge_outputs(stack)
        packed = self._pack(stack, i_map, stage, src_seqs, tgt_seqs)
        gates = None if (self.ablations.no_aligner or self.dynamic_gates is not None) else self.gates
        logits, state = self.decoder.forward(
            packed.t0, fused, gates, valid=packed.valid, dynamic_gates=self.dynamic_gates
        )
        return logits, state, packed

    def loss_on_batch(self, stage: str, src_seqs: list[np.ndarray], tgt_seqs: list[np.ndarray]) -> Tensor:
        if tgt_seqs is None or any(len(t) == 0 for t in tgt_seqs):
            raise ContractError("every training example needs a nonempty target")
        logits, _, packed = self.forward_batch(stage, src_seqs, tgt_seqs)
        batch, width, vocab = logits.shape
        flat = ad.reshape(logits, (batch * width, vocab))
        return ad.cross_entropy(flat, packed.labels.reshape(-1), packed.loss_mask.reshape(-1))

    def generate_answer(self, stage: str, src_seq: np.ndarray, max_new_tokens: int = 16) -> list[int]:
        """Greedy answer tokens for one source sequence."""
        stack = self.encode_sources([np.asarray(src_seq, dtype=np.int64)])
        i_map, fused = self.bridge_outputs(stack)
        packed = self._pack(stack, i_map, stage, [np.asarray(src_seq, dtype=np.int64)], None)
        gates = None if (self.ablations.no_aligner or self.dynamic_gates is not None) else self.gates
        return generate(
            self.decoder, packed.t0, fused, gates, max_new_tokens, dynamic_gates=self.dynamic_gates
        )

    def pooled_final_state(
        self, stage: str, src_seq: np.ndarray, include_prompt: bool = False
    ) -> np.ndarray:
        """Mean over real positions of the last layer's hidden state T_m.

        By default pooling covers only the raw input-token span, excluding
        the soft prompt and its frame markers; when the layout carries no
        input tokens (translation stage) the whole valid span is pooled.
        ``include_prompt`` forces whole-span pooling.
        """
        _, state, packed = self.forward_batch(stage, [np.asarray(src_seq, dtype=np.int64)], None)
        final = state.states[-1].data[0]
        length = int(packed.valid[0].sum())
        start, span = packed.user_spans[0]
        if include_prompt or span == 0:
            return final[:length].mean(axis=0)
        return final[start : start + span].mean(axis=0)
