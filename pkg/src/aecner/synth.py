"""Synthetic dataset generators for end-to-end checks and demos.

Both tasks use latin tokenization (every token is an opaque vocabulary id)
and whole-sentence entity spans, which keeps span structure learnable byable
transition scores alone and lets the type decision aggregate emission
evidence across the whole span:

- the separable task draws every token of a sentence from its span type's
  private inventory (a deterministic token->type mapping) and gives each
  type a disjoint sentence-length band, so the pattern is fully learnable
  from the labeled data alone;
- the cue task fills sentences with type-neutral tokens plus one unique,
  never-repeated marker token in final position. A shared cue word reveals
  the type in 70% of sentences; the other 30% are ambiguous on purpose:
  their type is recoverable only from knowledge acquired elsewhere. The
  elucidation corpus is that elsewhere: the mock reply "E:<span>:<type>:<hash>"
  puts each sentence's marker token within the encoder window of its type
  name, so masked-language pre-training clusters marker embeddings by type.
"""

from __future__ import annotations

import numpy as np

from .core import Dataset, EntitySpan, LabelScheme, Sentence, derive_seed

SEP_TYPES = ("alpha", "beta", "gamma")
LENGTH_BANDS = ((6, 10), (16, 20), (26, 30))


def make_separable_dataset(
    n_sentences: int,
    seed: int,
    tokens_per_type: int = 20,
    length_bands=LENGTH_BANDS,
) -> Dataset:
    """Type-pure sentences: one whole-sentence span whose tokens all come
    from the span type's inventory, with per-type sentence-length bands."""
    rng = np.random.default_rng(derive_seed("synth-separable", seed))
    scheme = LabelScheme(SEP_TYPES)
    inventory = {
        t: [f"{t[0]}{i:02d}" for i in range(tokens_per_type)] for t in SEP_TYPES
    }
    rows = []
    for i in range(n_sentences):
        ti = i % len(SEP_TYPES)
        etype = SEP_TYPES[ti]
        lo, hi = length_bands[ti]
        n = int(rng.integers(lo, hi + 1))
        texts = [
            inventory[etype][int(rng.integers(tokens_per_type))] for _ in range(n)
        ]
        sent = Sentence.from_texts(f"s{i:05d}", texts)
        rows.append((sent, (EntitySpan(0, n, etype),)))
    return Dataset(tuple(rows), scheme, token_mode="latin")


def make_cue_dataset(
    n_sentences: int,
    seed: int,
    ambiguous_frac: float = 0.3,
    n_neutral_tokens: int = 12,
    min_len: int = 8,
    max_len: int = 14,
) -> Dataset:
    """Whole-sentence spans of type-neutral tokens, closed by one unique
    marker token. 70% of sentences carry the shared type cue word; the
    ambiguous rest leave the marker as the only type evidence."""
    rng = np.random.default_rng(derive_seed("synth-cue", seed))
    scheme = LabelScheme(SEP_TYPES)
    neutral = [f"n{i:02d}" for i in range(n_neutral_tokens)]
    cues = {t: f"cue_{t}" for t in SEP_TYPES}

    period = 10
    n_ambiguous_per_period = int(round(ambiguous_frac * period))
    rows = []
    for i in range(n_sentences):
        etype = SEP_TYPES[i % len(SEP_TYPES)]
        ambiguous = (i % period) < n_ambiguous_per_period
        n = int(rng.integers(min_len, max_len + 1))
        # Fixed three-token tail: the marker's nearby context is identical in
        # every sentence, so masked-LM gradients through the marker embedding
        # carry only type information, never sentence-specific filler noise.
        body = n - 3
        texts = [neutral[int(rng.integers(n_neutral_tokens))] for _ in range(body)]
        if not ambiguous:
            texts[int(rng.integers(0, body))] = cues[etype]
        texts += ["kk0", "kk1", f"x{i:04d}"]  # unique marker, sentence-final
        sent = Sentence.from_texts(f"s{i:05d}", texts)
        rows.append((sent, (EntitySpan(0, n, etype),)))
    return Dataset(tuple(rows), scheme, token_mode="latin")


def is_ambiguous_cue_sentence(sentence: Sentence) -> bool:
    """True when the sentence carries no cue word."""
    return not any(t.text.startswith("cue_") for t in sentence.tokens)
