import numpy as np
import pytest

from aecner.core import PAD
from aecner.encoder import (
    ENCODER_TENSOR_ORDER,
    CheckpointError,
    EncoderConfig,
    EncoderError,
    EncoderParams,
    backward,
    emissions,
    encode,
    forward,
    init_params,
    load_encoder,
    mlm_logits,
    read_container,
    save_encoder,
    write_container,
)

from oracles import assert_grad_close, central_difference


def tiny_config(**kw):
    base = dict(vocab_size=11, dim=4, radius=1, hidden=5, num_tags=3,
                dropout=0.0, maxlen=8)
    base.update(kw)
    return EncoderConfig(**base)


# ---------------------------------------------------------------- init


def test_init_deterministic():
    cfg = tiny_config()
    a = init_params(cfg, seed=9)
    b = init_params(cfg, seed=9)
    for name in ENCODER_TENSOR_ORDER:
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_init_pad_row_zero_and_range():
    p = init_params(tiny_config(), seed=4)
    assert np.all(p.token_emb[PAD] == 0.0)
    for name in ("token_emb", "pos_emb", "mix_w", "mlm_w", "emit_w"):
        arr = getattr(p, name)
        assert np.all(np.abs(arr) < 0.05)
    for name in ("mix_b", "mlm_b", "emit_b"):
        assert np.all(getattr(p, name) == 0.0)


# ---------------------------------------------------------------- forward


def test_single_token_zero_radius_formula():
    cfg = tiny_config(radius=0)
    p = init_params(cfg, seed=1)
    h = encode(p, [7])
    expected = np.tanh((p.token_emb[7] + p.pos_emb[0]) @ p.mix_w + p.mix_b)
    assert np.allclose(h[0], expected)
    assert h.shape == (1, cfg.hidden)


def test_eval_mode_bitwise_deterministic():
    p = init_params(tiny_config(dropout=0.3), seed=2)
    a = encode(p, [5, 6, 7], train_mode=False)
    b = encode(p, [5, 6, 7], train_mode=False)
    assert np.array_equal(a, b)


def test_train_mode_seeded_dropout_reproducible():
    p = init_params(tiny_config(dropout=0.5), seed=2)
    a = encode(p, [5, 6, 7], train_mode=True, seed=123)
    b = encode(p, [5, 6, 7], train_mode=True, seed=123)
    c = encode(p, [5, 6, 7], train_mode=True, seed=124)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_boundary_positions_use_pad_embedding():
    cfg = tiny_config(radius=1)
    p = init_params(cfg, seed=3)
    cache = forward(p, [5, 6, 7])
    # position 0 consumes (PAD, t0, t1)
    pad_vec = p.token_emb[PAD]
    first_slot = cache.window_x[0, : cfg.dim]
    assert np.allclose(first_slot, pad_vec)
    assert not cache.valid[0, 0] and cache.valid[0, 1] and cache.valid[0, 2]


def test_too_long_sequence_rejected():
    p = init_params(tiny_config(maxlen=3), seed=0)
    with pytest.raises(EncoderError, match="maxlen"):
        encode(p, [5, 5, 5, 5])


def test_out_of_vocab_id_rejected():
    p = init_params(tiny_config(), seed=0)
    with pytest.raises(EncoderError, match="vocabulary"):
        encode(p, [99])


# ---------------------------------------------------------------- heads


def test_mlm_logits_zero_hidden_is_bias():
    p = init_params(tiny_config(), seed=5)
    p.mlm_b[:] = np.arange(p.config.vocab_size)
    out = mlm_logits(p, np.zeros((4, p.config.hidden)))
    assert np.allclose(out, np.tile(p.mlm_b, (4, 1)))


def test_head_shapes():
    p = init_params(tiny_config(), seed=5)
    h = encode(p, [5, 6])
    assert mlm_logits(p, h).shape == (2, p.config.vocab_size)
    assert emissions(p, h).shape == (2, p.config.num_tags)


def test_head_shape_mismatch_rejected():
    p = init_params(tiny_config(), seed=5)
    with pytest.raises(EncoderError, match="hidden"):
        mlm_logits(p, np.zeros((2, p.config.hidden + 1)))


# ---------------------------------------------------------------- backward


def scalar_loss_through_heads(p, ids, w_mlm, w_emit, train=False, seed=0):
    """Deterministic composed scalar: weighted sums of both head outputs."""
    cache = forward(p, ids, train_mode=train, seed=seed)
    total = 0.0
    if w_mlm is not None:
        total += float((mlm_logits(p, cache.hidden) * w_mlm).sum())
    if w_emit is not None:
        total += float((emissions(p, cache.hidden) * w_emit).sum())
    return total, cache


@pytest.mark.parametrize("train", [False, True])
def test_backward_matches_finite_differences(train):
    rng = np.random.default_rng(71)
    cfg = tiny_config(dropout=0.4 if train else 0.0)
    p = init_params(cfg, seed=8)
    ids = [5, 0, 7, 10]  # includes PAD inside the sentence
    w_mlm = rng.normal(size=(4, cfg.vocab_size))
    w_emit = rng.normal(size=(4, cfg.num_tags))

    _, cache = scalar_loss_through_heads(p, ids, w_mlm, w_emit, train, seed=5)
    grads = backward(p, cache, d_mlm_logits=w_mlm, d_emissions=w_emit)

    for name in ENCODER_TENSOR_ORDER:
        arr = getattr(p, name)
        fd = central_difference(
            lambda: scalar_loss_through_heads(p, ids, w_mlm, w_emit, train, seed=5)[0],
            arr,
        )
        assert_grad_close(grads[name], fd, what=name)


def test_backward_zero_upstream_zero_grads():
    p = init_params(tiny_config(), seed=8)
    cache = forward(p, [5, 6])
    grads = backward(
        p, cache,
        d_mlm_logits=np.zeros((2, p.config.vocab_size)),
        d_emissions=np.zeros((2, p.config.num_tags)),
    )
    for name, g in grads.items():
        assert np.all(g == 0.0), name


def test_pad_row_untouched_when_pad_absent():
    cfg = tiny_config(radius=0)  # no boundary padding at radius 0
    p = init_params(cfg, seed=8)
    cache = forward(p, [5, 6, 7])
    grads = backward(p, cache, d_emissions=np.ones((3, cfg.num_tags)))
    assert np.all(grads["token_emb"][PAD] == 0.0)
    assert np.any(grads["token_emb"][5] != 0.0)


def test_backward_shape_mismatch_rejected():
    p = init_params(tiny_config(), seed=8)
    cache = forward(p, [5, 6])
    with pytest.raises(EncoderError, match="shape"):
        backward(p, cache, d_emissions=np.zeros((3, p.config.num_tags)))


# ---------------------------------------------------------------- container


def test_checkpoint_round_trip(tmp_path):
    p = init_params(tiny_config(), seed=13)
    path = tmp_path / "enc.ckpt"
    save_encoder(path, p, seed_lineage=[13], extra_header={"note": "x"})
    loaded, header = load_encoder(path)
    assert header["seed_lineage"] == [13]
    assert header["note"] == "x"
    assert loaded.config == p.config
    for name in ENCODER_TENSOR_ORDER:
        # float32 storage: round trip must match at float32 precision
        assert np.allclose(getattr(loaded, name), getattr(p, name), atol=1e-6)


def test_checkpoint_save_is_deterministic(tmp_path):
    p = init_params(tiny_config(), seed=13)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_encoder(a, p, seed_lineage=[13])
    save_encoder(b, p, seed_lineage=[13])
    assert a.read_bytes() == b.read_bytes()


def test_corrupt_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        read_container(path)


def test_version_mismatch_names_both_versions(tmp_path):
    import json
    import struct

    path = tmp_path / "old.ckpt"
    header = json.dumps({"format_version": 0, "tensors": []}).encode()
    path.write_bytes(b"AENC" + struct.pack("<I", len(header)) + header)
    with pytest.raises(CheckpointError, match="version 0.*expected 1"):
        read_container(path)


def test_truncated_tensor_rejected(tmp_path):
    p = init_params(tiny_config(), seed=1)
    path = tmp_path / "t.ckpt"
    save_encoder(path, p, seed_lineage=[1])
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_container(path)


def test_write_container_header_fields(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, {"kind": "test"}, {"x": np.arange(6, dtype=float).reshape(2, 3)})
    header, tensors = read_container(path)
    assert header["kind"] == "test"
    assert header["tensors"] == [{"name": "x", "shape": [2, 3]}]
    assert np.allclose(tensors["x"], np.arange(6).reshape(2, 3))
