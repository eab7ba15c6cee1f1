import numpy as np
import pytest

from aecner.core import MASK, NUM_RESERVED, PAD, UNK, build_vocab, tokenize
from aecner.cote import CoteCorpus, CoteRecord
from aecner.encoder import ENCODER_TENSOR_ORDER, EncoderConfig, init_params
from aecner.mlm import (
    MaskedBatch,
    MlmError,
    PretrainConfig,
    mask_tokens,
    mlm_loss,
    pretrain,
)

from oracles import assert_grad_close, central_difference


def make_corpus(texts):
    records = tuple(
        CoteRecord(
            text=t, sentence_id=f"s{i:05d}", span_start=0, span_end=1,
            entity_type="a", strategy="explain", model="mock",
            tokens=max(1, len(t.split())),
        )
        for i, t in enumerate(texts)
    )
    return CoteCorpus(records, "explain", "test-fingerprint")


CFG = PretrainConfig(token_mode="latin")


# ---------------------------------------------------------------- masking


def test_mask_everything_at_ratio_one():
    cfg = PretrainConfig(mask_ratio=1.0, replace_split=(1.0, 0.0, 0.0))
    ids = np.array([5, 6, 7, 8])
    out = mask_tokens(ids, cfg, seed=1, vocab_size=20)
    assert np.all(out.corrupted == MASK)
    assert list(out.target_positions) == [0, 1, 2, 3]
    assert list(out.originals) == [5, 6, 7, 8]


def test_mask_ratio_zero_forces_one_target():
    cfg = PretrainConfig(mask_ratio=0.0)
    out = mask_tokens(np.array([5, 6, 7]), cfg, seed=3, vocab_size=20)
    assert out.target_positions.size == 1


def test_mask_never_touches_reserved_positions():
    cfg = PretrainConfig(mask_ratio=1.0)
    ids = np.array([PAD, 5, UNK, 6, MASK, 3, 4])
    out = mask_tokens(ids, cfg, seed=0, vocab_size=20)
    assert set(out.target_positions) == {1, 3}
    # untouched positions keep their ids
    for pos in (0, 2, 4, 5, 6):
        assert out.corrupted[pos] == ids[pos]


def test_mask_all_reserved_rejected():
    with pytest.raises(MlmError, match="reserved"):
        mask_tokens(np.array([PAD, UNK, MASK]), CFG, seed=0, vocab_size=20)


def test_mask_originals_recoverable():
    cfg = PretrainConfig(mask_ratio=0.5)
    ids = np.arange(5, 30)
    out = mask_tokens(ids, cfg, seed=9, vocab_size=40)
    assert np.array_equal(out.originals, ids[out.target_positions])
    restored = out.corrupted.copy()
    restored[out.target_positions] = out.originals
    assert np.array_equal(restored, ids)


def test_mask_deterministic_per_seed():
    ids = np.arange(5, 50)
    a = mask_tokens(ids, CFG, seed=4, vocab_size=60)
    b = mask_tokens(ids, CFG, seed=4, vocab_size=60)
    assert np.array_equal(a.corrupted, b.corrupted)
    assert np.array_equal(a.target_positions, b.target_positions)


def test_mask_statistics_binomial_and_split():
    cfg = PretrainConfig(mask_ratio=0.15)
    n_seq, seq_len = 500, 100
    selected = masked = randomized = kept = 0
    total = 0
    rng = np.random.default_rng(0)
    for i in range(n_seq):
        ids = rng.integers(NUM_RESERVED, 600, size=seq_len)
        out = mask_tokens(ids, cfg, seed=i, vocab_size=600)
        total += seq_len
        selected += out.target_positions.size
        for pos, orig in zip(out.target_positions, out.originals):
            new = out.corrupted[pos]
            if new == MASK:
                masked += 1
            elif new == orig:
                kept += 1
            else:
                randomized += 1
    frac = selected / total
    assert 0.13 <= frac <= 0.17
    assert abs(masked / selected - 0.80) <= 0.03
    assert abs(randomized / selected - 0.10) <= 0.03
    assert abs(kept / selected - 0.10) <= 0.03


# ---------------------------------------------------------------- loss


def test_loss_uniform_logits_is_log_vocab():
    batch = MaskedBatch(
        corrupted=np.array([MASK, 6]), target_positions=np.array([0]),
        originals=np.array([5]), length=2,
    )
    V = 12
    loss, grad = mlm_loss(np.zeros((2, V)), batch)
    assert loss == pytest.approx(np.log(V))
    assert np.all(grad[1] == 0.0)


def test_loss_peaked_correct_class_near_zero():
    batch = MaskedBatch(
        corrupted=np.array([MASK]), target_positions=np.array([0]),
        originals=np.array([5]), length=1,
    )
    logits = np.full((1, 8), -50.0)
    logits[0, 5] = 50.0
    loss, _ = mlm_loss(logits, batch)
    assert 0 <= loss < 1e-12


def test_loss_zero_targets_rejected():
    batch = MaskedBatch(
        corrupted=np.array([5]), target_positions=np.array([], dtype=int),
        originals=np.array([], dtype=int), length=1,
    )
    with pytest.raises(MlmError, match="zero targets"):
        mlm_loss(np.zeros((1, 6)), batch)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 6))
    batch = MaskedBatch(
        corrupted=np.array([MASK, 3, MASK, 1]),
        target_positions=np.array([0, 2]),
        originals=np.array([5, 4]),
        length=4,
    )
    count = batch.target_positions.size
    _, grad = mlm_loss(logits, batch)  # gradient of the summed loss
    fd = central_difference(lambda: mlm_loss(logits, batch)[0] * count, logits)
    assert_grad_close(grad, fd, what="mlm logits")


def test_loss_nonnegative_random():
    rng = np.random.default_rng(8)
    for _ in range(25):
        n, V = int(rng.integers(1, 6)), int(rng.integers(6, 12))
        k = int(rng.integers(1, n + 1))
        targets = rng.choice(n, size=k, replace=False)
        batch = MaskedBatch(
            corrupted=rng.integers(0, V, size=n),
            target_positions=np.sort(targets),
            originals=rng.integers(NUM_RESERVED, V, size=k),
            length=n,
        )
        loss, _ = mlm_loss(rng.normal(size=(n, V)), batch)
        assert loss >= 0.0


# ---------------------------------------------------------------- pretrain


def small_setup(texts, seed=0):
    corpus = make_corpus(texts)
    vocab = build_vocab([tokenize(t, "latin") for t in texts])
    cfg = EncoderConfig(vocab_size=len(vocab), dim=16, radius=1, hidden=24,
                        num_tags=3, dropout=0.1, maxlen=32)
    return corpus, vocab, init_params(cfg, seed=seed)


def test_pretrain_zero_epochs_identity():
    corpus, vocab, params = small_setup(["f00 f01 f02"] * 20)
    out = pretrain(corpus, params, PretrainConfig(epochs=0, token_mode="latin"), vocab)
    for name in ENCODER_TENSOR_ORDER:
        assert np.array_equal(getattr(out, name), getattr(params, name))


def test_pretrain_deterministic():
    texts = [f"f{i % 4:02d} f{(i + 1) % 4:02d} f{(i + 2) % 4:02d}" for i in range(40)]
    corpus, vocab, params = small_setup(texts)
    cfg = PretrainConfig(epochs=2, token_mode="latin", seed=5)
    a = pretrain(corpus, params, cfg, vocab)
    b = pretrain(corpus, params, cfg, vocab)
    for name in ENCODER_TENSOR_ORDER:
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_pretrain_does_not_mutate_input():
    corpus, vocab, params = small_setup(["f00 f01 f02"] * 20)
    before = {n: getattr(params, n).copy() for n in ENCODER_TENSOR_ORDER}
    pretrain(corpus, params, PretrainConfig(epochs=1, token_mode="latin"), vocab)
    for name, arr in before.items():
        assert np.array_equal(arr, getattr(params, name))


def test_pretrain_leaves_emission_head_untouched():
    corpus, vocab, params = small_setup(["f00 f01 f02 f03"] * 32)
    out = pretrain(corpus, params, PretrainConfig(epochs=2, token_mode="latin"), vocab)
    assert np.array_equal(out.emit_w, params.emit_w)
    assert np.array_equal(out.emit_b, params.emit_b)
    assert not np.array_equal(out.mlm_w, params.mlm_w)


def test_pretrain_loss_decreases_on_repetitive_corpus():
    rng = np.random.default_rng(3)
    texts = [
        " ".join(f"f{j:02d}" for j in rng.permutation(6)[:4]) for _ in range(200)
    ]
    corpus, vocab, params = small_setup(texts)
    losses = []
    pretrain(
        corpus, params, PretrainConfig(epochs=5, token_mode="latin"), vocab,
        log_fn=lambda e: losses.append(e["mean_loss"]),
    )
    assert len(losses) == 5
    assert losses[-1] < losses[0]


def test_pretrain_memorizes_single_repeated_sentence():
    texts = ["f00 f01 f02 f03 f04 f05"] * 320
    corpus = make_corpus(texts)
    vocab = build_vocab([tokenize(t, "latin") for t in texts])
    cfg = EncoderConfig(vocab_size=len(vocab), num_tags=3)  # default sizes
    params = init_params(cfg, seed=0)
    losses = []
    pretrain(
        corpus, params, PretrainConfig(epochs=50, token_mode="latin", seed=0),
        vocab, log_fn=lambda e: losses.append(e["mean_loss"]),
    )
    assert losses[-1] < 0.1


def test_pretrain_long_text_chunked_not_truncated():
    # 80 tokens with maxlen 32: the tail tokens must still reach the vocab
    long_text = " ".join(f"w{i:03d}" for i in range(80))
    corpus = make_corpus([long_text] * 8)
    vocab = build_vocab([tokenize(long_text, "latin")])
    cfg = EncoderConfig(vocab_size=len(vocab), dim=8, radius=1, hidden=8,
                        num_tags=3, maxlen=32)
    params = init_params(cfg, seed=0)
    out = pretrain(corpus, params, PretrainConfig(epochs=1, token_mode="latin"), vocab)
    # tokens past position 32 appear only in later chunks; their embeddings move
    tail_id = vocab.lookup("w070")
    assert not np.array_equal(out.token_emb[tail_id], params.token_emb[tail_id])


def test_pretrain_empty_corpus_rejected():
    _, vocab, params = small_setup(["f00 f01"])
    empty = CoteCorpus((), "explain", "fp")
    with pytest.raises(MlmError, match="empty"):
        pretrain(empty, params, CFG, vocab)


def test_pretrain_run_log_fields():
    corpus, vocab, params = small_setup(["f00 f01 f02"] * 20)
    entries = []
    pretrain(
        corpus, params, PretrainConfig(epochs=2, token_mode="latin"), vocab,
        log_fn=entries.append,
    )
    assert [e["epoch"] for e in entries] == [0, 1]
    for e in entries:
        assert set(e) == {"epoch", "mean_loss", "examples_seen", "wall_ms"}
    assert entries[1]["examples_seen"] == 40
