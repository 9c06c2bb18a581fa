"""End-to-end model wiring: batch packing, ablation rewiring, pooling, and
the frozen-backbone digest.

The perturbation tests mutate individual encoder layers and re-run the rest
of the pipeline by hand, which pins down *which* states each ablation is
allowed to read, not just output shapes.
"""

import numpy as np
import pytest

from layerbridge.decoder import DecoderConfig
from layerbridge.encoder import EncoderConfig, LayerStack
from layerbridge.errors import ConfigError, ContractError
from layerbridge.model import AblationFlags, BridgedModel

EC = EncoderConfig(vocab_size=32, d_enc=16, n_layers=3, n_heads=2, d_ff=24, max_positions=16)
DC = DecoderConfig(vocab_size=32, d_dec=16, n_layers=2, n_heads=2, d_ff=24, max_positions=24)

SRC = [np.array([5, 6, 7]), np.array([9])]
TGT = [np.array([10, 11]), np.array([12, 13, 14, 15])]


@pytest.fixture()
def model():
    return BridgedModel(EC, DC, seed=0)


def logits_from_stack(model, stack, stage, src_seqs):
    """Re-run everything downstream of the encoder on a hand-edited stack."""
    i_map, fused = model.bridge_outputs(stack)
    packed = model._pack(stack, i_map, stage, src_seqs, None)
    gates = None if (model.ablations.no_aligner or model.dynamic_gates is not None) else model.gates
    logits, _ = model.decoder.forward(
        packed.t0, fused, gates, valid=packed.valid, dynamic_gates=model.dynamic_gates
    )
    return logits.data


def perturbed(stack: LayerStack, layer: int, eps: float = 0.5) -> LayerStack:
    states = [s.copy() for s in stack.states]
    states[layer] = states[layer] + eps
    return LayerStack(states=states, mask=stack.mask)


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------


def test_translation_packing_layout(model):
    logits, _, packed = model.forward_batch("translation", SRC, TGT)
    # row layout is [bos; soft prompt(p); sep; targets], right-padded
    assert packed.t0.shape == (2, 7, 16)
    assert logits.shape == (2, 7, 32)
    assert packed.prompt_lens == [5, 3]
    assert packed.user_spans == [(0, 0), (0, 0)]
    assert packed.valid.all()
    want_labels = np.array([[0, 0, 0, 0, 10, 11, 3], [0, 0, 12, 13, 14, 15, 3]])
    want_mask = np.array([[0, 0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 1, 1, 1]], dtype=bool)
    assert np.array_equal(packed.labels, want_labels)
    assert np.array_equal(packed.loss_mask, want_mask)


def test_task_packing_appends_user_tokens(model):
    _, _, packed = model.forward_batch("task", SRC, TGT)
    # [bos; soft prompt(p); sep; user(p); targets]
    assert packed.prompt_lens == [8, 4]
    assert packed.user_spans == [(5, 3), (3, 1)]
    assert packed.t0.shape[1] == 10


def test_supervision_starts_on_last_prompt_position(model):
    _, _, packed = model.forward_batch("task", [SRC[0]], [np.array([10])])
    p0 = packed.prompt_lens[0] - 1
    assert packed.loss_mask[0, p0] and packed.labels[0, p0] == 10
    assert packed.labels[0, p0 + 1] == DC.eos_id
    assert packed.loss_mask[0].sum() == 2


def test_no_llm_input_drops_user_block():
    m = BridgedModel(EC, DC, ablations=AblationFlags(no_llm_input=True), seed=0)
    _, _, packed = m.forward_batch("task", SRC, TGT)
    assert packed.prompt_lens == [5, 3]
    assert packed.user_spans == [(0, 0), (0, 0)]


def test_no_adapter_drops_soft_prompt():
    m = BridgedModel(EC, DC, ablations=AblationFlags(no_adapter=True), seed=0)
    _, _, packed = m.forward_batch("task", SRC, TGT)
    assert packed.prompt_lens == [5, 3]
    assert packed.user_spans == [(2, 3), (2, 1)]


def test_packing_overflow_raises(model):
    long_seq = np.arange(4, 16)
    with pytest.raises(ConfigError, match="max_positions"):
        model.forward_batch("translation", [long_seq], [long_seq])


def test_unknown_stage_rejected(model):
    with pytest.raises(ConfigError, match="stage"):
        model.forward_batch("pretrain", SRC, None)


def test_loss_requires_nonempty_targets(model):
    with pytest.raises(ContractError, match="nonempty target"):
        model.loss_on_batch("translation", SRC, [np.array([10]), np.array([], dtype=np.int64)])


def test_encode_sources_masks_padding(model):
    stack = model.encode_sources(SRC)
    assert np.array_equal(stack.mask, np.array([[True, True, True], [True, False, False]]))


# ---------------------------------------------------------------------------
# ablation wiring
# ---------------------------------------------------------------------------


def test_gate_zero_matches_aligner_free_model(model):
    m_plain = BridgedModel(EC, DC, ablations=AblationFlags(no_aligner=True), seed=0)
    a, _, _ = model.forward_batch("task", SRC, TGT)
    b, _, _ = m_plain.forward_batch("task", SRC, TGT)
    assert np.max(np.abs(a.data - b.data)) <= 1e-6


def test_no_aligner_never_reads_lower_layers():
    m = BridgedModel(EC, DC, ablations=AblationFlags(no_aligner=True), seed=0)
    stack = m.encode_sources(SRC)
    base = logits_from_stack(m, stack, "task", SRC)
    for layer in range(EC.n_layers):
        assert np.array_equal(base, logits_from_stack(m, perturbed(stack, layer), "task", SRC))


def test_no_adapter_never_reads_final_layer():
    m = BridgedModel(EC, DC, ablations=AblationFlags(no_adapter=True), seed=0)
    stack = m.encode_sources(SRC)
    base = logits_from_stack(m, stack, "task", SRC)
    assert np.array_equal(base, logits_from_stack(m, perturbed(stack, EC.n_layers), "task", SRC))


def test_full_model_reads_both_ends(model):
    # open the gates so fused cross-attention actually contributes
    for g in model.gates.values:
        g.data[...] = 0.7
    stack = model.encode_sources(SRC)
    base = logits_from_stack(model, stack, "task", SRC)
    assert not np.array_equal(base, logits_from_stack(model, perturbed(stack, 0), "task", SRC))
    assert not np.array_equal(
        base, logits_from_stack(model, perturbed(stack, EC.n_layers), "task", SRC)
    )


def test_conflicting_ablations_rejected():
    with pytest.raises(ConfigError, match="blind"):
        BridgedModel(EC, DC, ablations=AblationFlags(no_adapter=True, no_aligner=True), seed=0)


def test_trainable_params_respect_ablations():
    full = BridgedModel(EC, DC, seed=0).trainable_params()
    groups = {name.split(".")[0] for name in full}
    assert groups == {"adapter", "aligner", "gates"}

    no_ad = BridgedModel(EC, DC, ablations=AblationFlags(no_adapter=True), seed=0).trainable_params()
    assert not any(n.startswith("adapter.") for n in no_ad)

    no_al = BridgedModel(EC, DC, ablations=AblationFlags(no_aligner=True), seed=0).trainable_params()
    assert {name.split(".")[0] for name in no_al} == {"adapter"}

    dyn = BridgedModel(EC, DC, ablations=AblationFlags(dynamic_gate=True), seed=0).trainable_params()
    assert any(n.startswith("gates.dynamic.") for n in dyn)
    assert not any(n.startswith("gates.layer") for n in dyn)


def test_ablation_active_listing():
    flags = AblationFlags(no_llm_input=True, layer_subset="last:2")
    assert flags.active() == ["no_llm_input", "layer_subset=last:2"]
    assert AblationFlags().active() == []


# ---------------------------------------------------------------------------
# pooling, generation, digest
# ---------------------------------------------------------------------------


def test_pooled_state_covers_user_span(model):
    _, state, packed = model.forward_batch("task", [SRC[0]], None)
    final = state.states[-1].data[0]
    start, span = packed.user_spans[0]
    want = final[start : start + span].mean(axis=0)
    assert np.array_equal(model.pooled_final_state("task", SRC[0]), want)


def test_pooled_state_include_prompt(model):
    _, state, packed = model.forward_batch("task", [SRC[0]], None)
    final = state.states[-1].data[0]
    length = int(packed.valid[0].sum())
    want = final[:length].mean(axis=0)
    assert np.array_equal(model.pooled_final_state("task", SRC[0], include_prompt=True), want)


def test_pooled_state_translation_uses_whole_span(model):
    _, state, packed = model.forward_batch("translation", [SRC[0]], None)
    final = state.states[-1].data[0]
    length = int(packed.valid[0].sum())
    want = final[:length].mean(axis=0)
    assert np.array_equal(model.pooled_final_state("translation", SRC[0]), want)


def test_generate_answer_is_deterministic(model):
    a = model.generate_answer("task", SRC[0], max_new_tokens=5)
    b = model.generate_answer("task", SRC[0], max_new_tokens=5)
    assert a == b
    assert all(isinstance(t, int) for t in a)
    assert len(a) <= 5


def test_frozen_digest_ignores_bridge_seed():
    assert BridgedModel(EC, DC, seed=0).frozen_digest() == BridgedModel(EC, DC, seed=5).frozen_digest()


def test_frozen_digest_tracks_backbone_config():
    other = DecoderConfig(
        vocab_size=32, d_dec=16, n_layers=2, n_heads=2, d_ff=24, max_positions=24, head_scale=2.0
    )
    assert BridgedModel(EC, DC, seed=0).frozen_digest() != BridgedModel(EC, other, seed=0).frozen_digest()


def test_bridge_seed_changes_trainable_init():
    a = BridgedModel(EC, DC, seed=0).trainable_params()["adapter.proj.weight"]
    b = BridgedModel(EC, DC, seed=5).trainable_params()["adapter.proj.weight"]
    assert not np.array_equal(a.data, b.data)
