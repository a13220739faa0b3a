import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ngramformer.errors import CheckpointError, ConfigError
from ngramformer.gradcheck import run_case
from ngramformer.layers import KINDS, LayerSpec
from ngramformer.model import (
    BOS,
    EOS,
    ModelConfig,
    build_model,
    count_params,
    greedy_decode,
    human_count,
    load_checkpoint,
    save_checkpoint,
    transformer_base_config,
)
from ngramformer.tensor import no_grad
from ngramformer.training import SequenceBatch, cross_entropy_loss

SA = LayerSpec()


def tiny(enc, dec, **kw):
    base = dict(d_model=8, n_heads=2, d_ff=16, vocab_size=11, max_len=16, dropout=0.0)
    base.update(kw)
    return ModelConfig(encoder_layers=list(enc), decoder_layers=list(dec), **base)


def _batch():
    return SequenceBatch.from_pairs([([3, 4, 5, 6], [6, 5, 4]), ([7, 8], [8, 7, 9, 10])])


# ---------------------------------------------------------------- construction


def test_ngram_then_attention_hybrid_builds():
    ng = LayerSpec("ngram", 5)
    cfg = ModelConfig(encoder_layers=[ng] * 3 + [SA] * 3, decoder_layers=[ng] * 3 + [SA] * 3)
    model = build_model(cfg, 0)
    assert [l.spec.kind for l in model.encoder] == ["ngram"] * 3 + ["self_attention"] * 3
    assert model.num_parameters() == count_params(cfg)


def test_vanilla_topology():
    cfg = ModelConfig(encoder_layers=[SA] * 6, decoder_layers=[SA] * 6)
    model = build_model(cfg, 0)
    assert len(model.encoder) == len(model.decoder) == 6
    assert all(l.spec.kind == "self_attention" for l in model.encoder + model.decoder)


def test_same_seed_bit_identical_parameters():
    cfg = tiny([LayerSpec("ngram", 2, True)], [LayerSpec("local_attention", 2)])
    a, b = build_model(cfg, 42).parameters(), build_model(cfg, 42).parameters()
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k].data, b[k].data)
    c = build_model(cfg, 43).parameters()
    assert not np.array_equal(a["embed.shared"].data, c["embed.shared"].data)


def test_use_global_in_decoder_rejected():
    with pytest.raises(ConfigError, match=r"decoder_layers\[0\]\.use_global"):
        build_model(tiny([SA], [LayerSpec("ngram", 3, True)]), 0)


def test_cross_attention_is_always_standard():
    model = build_model(tiny([LayerSpec("ngram", 2)], [LayerSpec("ngram", 2)]), 0)
    assert set(model.decoder[0].cross.named()) == {"wq", "wk", "wv", "wo"}


# ---------------------------------------------------------------- parameter counting


def test_transformer_base_count_matches_reported_61m():
    n = count_params(transformer_base_config())
    assert abs(n - 61_000_000) / 61_000_000 < 0.02
    assert human_count(n) == "60.9M"


def test_zero_layer_count_is_embedding_table():
    cfg = tiny([], [], vocab_size=37)
    assert count_params(cfg) == 37 * 8
    assert build_model(cfg, 0).num_parameters() == 37 * 8


def _enumerate_shapes(model):
    return sum(int(np.prod(p.shape)) for p in model.parameters().values())


def test_tiny_count_matches_enumeration():
    cfg = ModelConfig(d_model=4, n_heads=2, d_ff=8, vocab_size=10, encoder_layers=[SA], decoder_layers=[SA])
    model = build_model(cfg, 0)
    assert count_params(cfg) == _enumerate_shapes(model)
    # independent tally: embeddings 40; enc 4*16 + (32+8+32+4) + 2*8; dec 2*4*16 + 76 + 3*8
    assert count_params(cfg) == 40 + (64 + 76 + 16) + (128 + 76 + 24)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("side", ["encoder", "decoder"])
@pytest.mark.parametrize("depth", [1, 2])
@pytest.mark.parametrize("tied", [True, False])
def test_count_matches_construction(kind, side, depth, tied):
    spec = LayerSpec(kind, 3, use_global=(kind == "ngram" and side == "encoder"))
    layers = [spec] * depth
    cfg = tiny(layers if side == "encoder" else [SA], layers if side == "decoder" else [SA], tie_embeddings=tied)
    assert count_params(cfg) == build_model(cfg, 1).num_parameters()


# ---------------------------------------------------------------- forward


def test_single_token_logits_shape():
    model = build_model(tiny([SA], [SA]), 0)
    logits, _ = model.forward(np.array([[5]]), np.array([[BOS]]))
    assert logits.shape == (1, 1, 11)


def test_length_beyond_max_len_rejected():
    model = build_model(tiny([SA], [SA], max_len=4), 0)
    with pytest.raises(ValueError, match="max_len"):
        model.forward(np.full((1, 5), 3), np.array([[BOS]]))


def test_attention_weights_captured_per_layer():
    cfg = tiny([SA, LayerSpec("ngram", 2)], [LayerSpec("local_attention", 2)])
    batch = _batch()
    _, weights = build_model(cfg, 0).forward(batch.src, batch.tgt_in, batch.src_pad, batch.tgt_pad)
    assert set(weights) == {"encoder.0", "decoder.0", "decoder.0.cross"}
    assert weights["encoder.0"].shape == (2, 2, 4, 4)
    np.testing.assert_allclose(weights["decoder.0.cross"].sum(-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    kinds=st.lists(st.sampled_from(KINDS), min_size=1, max_size=2),
    n=st.integers(1, 3),
    t=st.integers(0, 5),
    seed=st.integers(0, 2**32 - 1),
)
def test_teacher_forcing_causality(kinds, n, t, seed):
    rng = np.random.default_rng(seed)
    cfg = tiny([LayerSpec(k, n) for k in kinds], [LayerSpec(k, n) for k in reversed(kinds)])
    model = build_model(cfg, int(rng.integers(1000)))
    src = rng.integers(3, 11, size=(2, 5))
    tgt = rng.integers(3, 11, size=(2, 6))
    tgt2 = tgt.copy()
    tgt2[:, t:] = rng.integers(3, 11, size=tgt2[:, t:].shape)
    with no_grad():
        a, _ = model.forward(src, tgt)
        b, _ = model.forward(src, tgt2)
    np.testing.assert_array_equal(a.data[:, :t], b.data[:, :t])


def test_all_attention_hybrid_equals_baseline_bitwise():
    baseline = ModelConfig(encoder_layers=[SA] * 2, decoder_layers=[SA] * 2, dropout=0.0)
    hybrid = ModelConfig(
        encoder_layers=[LayerSpec("self_attention", 3)] * 2,
        decoder_layers=[LayerSpec("self_attention", 7)] * 2,
        dropout=0.0,
    )
    batch = _batch()
    a, _ = build_model(baseline, 5).forward(batch.src, batch.tgt_in, batch.src_pad, batch.tgt_pad)
    b, _ = build_model(hybrid, 5).forward(batch.src, batch.tgt_in, batch.src_pad, batch.tgt_pad)
    np.testing.assert_array_equal(a.data, b.data)


def _loss_case(enc, dec):
    def build(rng):
        model = build_model(tiny(enc, dec), int(rng.integers(1000)))
        batch = _batch()

        def f():
            logits, _ = model.forward(batch.src, batch.tgt_in, batch.src_pad, batch.tgt_pad)
            return cross_entropy_loss(logits, batch.tgt_out, batch.tgt_pad)

        return f, list(model.parameters().values())

    return build


def test_two_layer_model_loss_gradient():
    enc = [LayerSpec("ngram", 2, True), SA]
    dec = [LayerSpec("local_attention", 2), LayerSpec("ngram", 2)]
    assert run_case("model", _loss_case(enc, dec)).error < 1e-4


def test_untied_model_loss_gradient():
    assert run_case("model", _loss_case([SA], [SA])).error < 1e-4


# ---------------------------------------------------------------- decoding


def test_forced_eos_gives_empty_body():
    model = build_model(tiny([SA], [SA]), 0)
    table = model.out_proj.data
    table[EOS] = 0.0
    table[EOS, 0] = 5.0
    last = model.decoder[-1].norm3
    last.gain.data[...] = 0.0
    last.bias.data[...] = 0.0
    last.bias.data[0] = 10.0
    assert greedy_decode(model, np.array([[3, 4, 5]]), 8) == [[]]


def test_greedy_steps_match_teacher_forced_columns():
    model = build_model(tiny([LayerSpec("ngram", 2, True)], [LayerSpec("ngram", 2), SA]), 3)
    src = np.array([[3, 4, 5, 6, 7], [8, 9, 10, 3, 0]])
    src_pad = src == 0
    bodies, step_logits = greedy_decode(model, src, 6, src_pad=src_pad, return_logits=True)
    for b, body in enumerate(bodies):
        emitted = [BOS, *body]
        steps = min(len(body) + 1, step_logits.shape[1])
        with no_grad():
            logits, _ = model.forward(src[b : b + 1], np.array([emitted[:steps]]), src_pad[b : b + 1])
        np.testing.assert_allclose(step_logits[b, :steps], logits.data[0], atol=1e-9)


def test_greedy_decode_is_deterministic_and_bounded():
    model = build_model(tiny([SA], [SA]), 8)
    src = np.array([[3, 4, 5]])
    a = greedy_decode(model, src, 5)
    assert a == greedy_decode(model, src, 5)
    assert len(a[0]) <= 5
    with pytest.raises(ValueError):
        greedy_decode(model, src, 17)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_lossless(tmp_path):
    cfg = tiny([LayerSpec("ngram", 2, True)], [LayerSpec("local_attention", 3)], tie_embeddings=False)
    model = build_model(cfg, 9)
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, extra={"step": 3})
    loaded, meta, _ = load_checkpoint(path)
    assert meta["extra"] == {"step": 3}
    assert loaded.config == model.config
    for k, p in model.parameters().items():
        assert np.array_equal(loaded.parameters()[k].data, p.data)


def test_corrupted_checkpoint_rejected(tmp_path):
    model = build_model(tiny([SA], [SA]), 0)
    path = tmp_path / "m.npz"
    save_checkpoint(path, model)
    raw = bytearray(path.read_bytes())
    at = bytes(raw).index(model.src_embed.data.tobytes()[:64]) + 3
    raw[at] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_tampered_tensor_fails_checksum(tmp_path):
    model = build_model(tiny([SA], [SA]), 0)
    path = tmp_path / "m.npz"
    save_checkpoint(path, model)
    with np.load(path) as npz:
        files = {k: npz[k] for k in npz.files}
    files["param/embed.shared"] = files["param/embed.shared"] + 1e-12
    np.savez(path, **files)
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
