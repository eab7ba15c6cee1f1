"""Masked-language-model corruption, loss, and the incremental pre-training loop.

Masking follows the BERT-style scheme: eligible (non-reserved) positions are
selected independently at the mask ratio, and selected positions are replaced
by the MASK id, a random vocabulary id, or kept, per the configured split.
The pre-training loop runs the encoder over an elucidation corpus and applies
AdamW updates to every tensor except the emission head, which only exists for
the downstream tagging task.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .core import MASK, NUM_RESERVED, Vocab, derive_seed, tokenize
from .cote import CoteCorpus
from .train import adamw_step, init_adamw


class MlmError(ValueError):
    pass


class PretrainDivergedError(RuntimeError):
    """Non-finite loss during pre-training; carries diagnostics."""


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    mask_ratio: float = 0.15
    # fractions of selected positions that are (masked, randomized, kept)
    replace_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    token_mode: str = "char"

    def __post_init__(self):
        if not (0.0 <= self.mask_ratio <= 1.0):
            raise MlmError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.epochs < 0 or self.batch_size < 1:
            raise MlmError(f"invalid epochs/batch_size: {self.epochs}/{self.batch_size}")
        split = self.replace_split
        if len(split) != 3 or any(x < 0 for x in split):
            raise MlmError(f"replace_split needs three non-negative parts: {split}")
        if abs(sum(split) - 1.0) > 1e-9:
            raise MlmError(f"replace_split must sum to 1, got {split}")


@dataclass(frozen=True)
class MaskedBatch:
    """One corrupted sequence with everything needed to score and learn from it."""

    corrupted: np.ndarray       # n, token ids after corruption
    target_positions: np.ndarray  # indices of selected positions
    originals: np.ndarray       # original ids at target positions only
    length: int


def mask_tokens(ids, cfg: PretrainConfig, seed: int, vocab_size: int) -> MaskedBatch:
    """Corrupt one id sequence.

    Reserved ids (PAD/UNK/MASK/BOS/EOS) are never selected. If the Bernoulli
    draws select nothing, one eligible position is forced so every batch has
    at least one prediction target.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] < 1:
        raise MlmError("ids must be a non-empty 1-D sequence")
    eligible = ids >= NUM_RESERVED
    eligible_idx = np.flatnonzero(eligible)
    if eligible_idx.size == 0:
        raise MlmError("every position holds a reserved id; nothing can be masked")

    rng = np.random.default_rng(seed)
    selected = eligible & (rng.random(ids.shape[0]) < cfg.mask_ratio)
    if not selected.any():
        selected[eligible_idx[rng.integers(eligible_idx.size)]] = True
    targets = np.flatnonzero(selected)

    corrupted = ids.copy()
    p_mask, p_random, _ = cfg.replace_split
    draw = rng.random(targets.size)
    for pos, u in zip(targets, draw):
        if u < p_mask:
            corrupted[pos] = MASK
        elif u < p_mask + p_random:
            if vocab_size > NUM_RESERVED:
                corrupted[pos] = rng.integers(NUM_RESERVED, vocab_size)
        # else: keep the original id
    return MaskedBatch(corrupted, targets, ids[targets], int(ids.shape[0]))


def mlm_loss(logits: np.ndarray, batch: MaskedBatch):
    """Negative log-likelihood of the original tokens at the target positions.

    Returns (mean loss over targets, gradient of the summed loss wrt logits);
    the gradient is softmax minus one-hot on target rows and zero elsewhere.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != batch.length:
        raise MlmError(f"logits shape {logits.shape} does not match length {batch.length}")
    targets = batch.target_positions
    if targets.size == 0:
        raise MlmError("masked batch has zero targets")

    rows = logits[targets]
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    picked = log_probs[np.arange(targets.size), batch.originals]
    loss_sum = float(-picked.sum())

    grad = np.zeros_like(logits)
    softmax = np.exp(log_probs)
    softmax[np.arange(targets.size), batch.originals] -= 1.0
    grad[targets] = softmax
    return loss_sum / targets.size, grad


def pretrain(
    corpus: CoteCorpus,
    params: enc.EncoderParams,
    cfg: PretrainConfig,
    vocab: Vocab,
    log_fn=None,
) -> enc.EncoderParams:
    """Incremental MLM pre-training over an elucidation corpus.

    Returns a new parameter set; the input is not modified. Emits one run-log
    entry per epoch through ``log_fn`` with fields epoch, mean_loss,
    examples_seen, and wall_ms.
    """
    if not corpus.records:
        raise MlmError("cannot pretrain on an empty corpus")
    work = params.copy()
    maxlen = work.config.maxlen

    chunks = []
    for rec in corpus.records:
        ids = vocab.encode(tokenize(rec.text, cfg.token_mode))
        for off in range(0, ids.shape[0], maxlen):
            piece = ids[off : off + maxlen]
            if piece.size and (piece >= NUM_RESERVED).any():
                chunks.append(piece)
    if not chunks:
        raise MlmError("corpus yields no maskable chunks under this vocabulary")

    # The emission head plays no part in the MLM objective; leave it untouched.
    group = {
        name: arr for name, arr in work.tensors().items()
        if name not in ("emit_w", "emit_b")
    }
    state = init_adamw(group, weight_decay=cfg.weight_decay)

    examples_seen = 0
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        order = np.random.default_rng(derive_seed("mlm-shuffle", cfg.seed, epoch))
        order = order.permutation(len(chunks))
        epoch_loss_sum = 0.0
        epoch_targets = 0
        for b, lo in enumerate(range(0, len(chunks), cfg.batch_size)):
            batch_idx = order[lo : lo + cfg.batch_size]
            grads = work.zero_grads()
            batch_loss_sum = 0.0
            batch_targets = 0
            for k, ci in enumerate(batch_idx):
                ids = chunks[ci]
                masked = mask_tokens(
                    ids, cfg, derive_seed("mlm-mask", cfg.seed, epoch, b, k),
                    vocab_size=work.config.vocab_size,
                )
                cache = enc.forward(
                    work, masked.corrupted, train_mode=True,
                    seed=derive_seed("mlm-drop", cfg.seed, epoch, b, k),
                )
                logits = enc.mlm_logits(work, cache.hidden)
                mean_loss, d_logits = mlm_loss(logits, masked)
                count = masked.target_positions.size
                batch_loss_sum += mean_loss * count
                batch_targets += count
                enc.backward(work, cache, d_mlm_logits=d_logits, grads=grads)
            if not np.isfinite(batch_loss_sum):
                norms = {n: float(np.linalg.norm(t)) for n, t in work.tensors().items()}
                raise PretrainDivergedError(
                    f"non-finite MLM loss at epoch {epoch} batch {b}; "
                    f"parameter norms: {norms}"
                )
            scale = 1.0 / batch_targets
            batch_grads = {n: grads[n] * scale for n in group}
            adamw_step(group, batch_grads, state, cfg.learning_rate)
            epoch_loss_sum += batch_loss_sum
            epoch_targets += batch_targets
            examples_seen += len(batch_idx)
        if log_fn is not None:
            log_fn({
                "epoch": epoch,
                "mean_loss": epoch_loss_sum / max(epoch_targets, 1),
                "examples_seen": examples_seen,
                "wall_ms": int((time.monotonic() - t0) * 1000),
            })
    return work
