"""Domain types, BIO codec, dataset IO, splitting, and vocabulary construction.

Everything here is immutable after construction; the operations are pure
functions, so all of it is safe to share across threads.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

# Reserved vocabulary slots, always ids 0..4 in this order.
PAD, UNK, MASK, BOS, EOS = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<unk>", "<mask>", "<bos>", "<eos>")
NUM_RESERVED = len(RESERVED_TOKENS)

_LATIN_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class DataError(ValueError):
    """Raised for malformed datasets, tags, or span layouts."""


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from a mixed tuple of labels and integers.

    Keeps nested PRNG streams (per epoch, batch, sentence, ...) independent
    of each other and reproducible across platforms.
    """
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") >> 1


@dataclass(frozen=True)
class Token:
    text: str
    index: int

    def __post_init__(self):
        if not self.text:
            raise DataError("token text must be non-empty")
        if "\n" in self.text:
            raise DataError(f"token text contains a newline: {self.text!r}")
        if self.index < 0:
            raise DataError(f"token index must be >= 0, got {self.index}")


@dataclass(frozen=True)
class Sentence:
    """An ordered, contiguously indexed token sequence with an opaque id."""

    id: str
    tokens: tuple[Token, ...]

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise DataError(f"sentence {self.id!r} has no tokens")
        for pos, tok in enumerate(self.tokens):
            if tok.index != pos:
                raise DataError(
                    f"sentence {self.id!r}: token index {tok.index} at position {pos}"
                )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def texts(self) -> tuple[str, ...]:
        return tuple(t.text for t in self.tokens)

    @staticmethod
    def from_texts(sid: str, texts) -> "Sentence":
        return Sentence(sid, tuple(Token(t, i) for i, t in enumerate(texts)))


@dataclass(frozen=True, order=True)
class EntitySpan:
    """Half-open token range [start, end) carrying an entity type."""

    start: int
    end: int
    etype: str

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise DataError(f"invalid span bounds [{self.start}, {self.end})")
        if not self.etype:
            raise DataError("span entity type must be non-empty")

    def surface(self, sentence: Sentence, token_mode: str = "char") -> str:
        if self.end > len(sentence):
            raise DataError(
                f"span [{self.start}, {self.end}) exceeds sentence length {len(sentence)}"
            )
        return detokenize(sentence.texts[self.start : self.end], token_mode)


class LabelScheme:
    """Entity-type inventory and the derived BIO tag alphabet.

    Tag 0 is always "O"; each entity type contributes a B- and an I- tag in
    inventory order. The tag<->index bijection is stable across save/load
    because it is fully determined by the ordered type tuple.
    """

    def __init__(self, entity_types):
        types = tuple(entity_types)
        if len(set(types)) != len(types):
            raise DataError(f"duplicate entity types: {types}")
        self.entity_types: tuple[str, ...] = types
        tags = ["O"]
        for etype in types:
            tags.append(f"B-{etype}")
            tags.append(f"I-{etype}")
        self.tags: tuple[str, ...] = tuple(tags)
        self._tag_to_index = {t: i for i, t in enumerate(self.tags)}

    @property
    def num_tags(self) -> int:
        return len(self.tags)

    def tag_index(self, tag: str) -> int:
        try:
            return self._tag_to_index[tag]
        except KeyError:
            raise DataError(f"unknown tag {tag!r}; known: {self.tags}") from None

    def tag_name(self, index: int) -> str:
        if not (0 <= index < len(self.tags)):
            raise DataError(f"tag index {index} out of range 0..{len(self.tags) - 1}")
        return self.tags[index]

    def begin_index(self, etype: str) -> int:
        return self.tag_index(f"B-{etype}")

    def inside_index(self, etype: str) -> int:
        return self.tag_index(f"I-{etype}")

    def split_tag(self, index: int) -> tuple[str, str | None]:
        """Return (prefix, etype); prefix is "O", "B" or "I"."""
        name = self.tag_name(index)
        if name == "O":
            return "O", None
        prefix, etype = name.split("-", 1)
        return prefix, etype

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelScheme) and self.entity_types == other.entity_types

    def __repr__(self) -> str:
        return f"LabelScheme({list(self.entity_types)})"


@dataclass(frozen=True)
class TagSequence:
    tags: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tags)


@dataclass(frozen=True)
class Dataset:
    """Sentences with their gold spans, plus the shared label scheme.

    ``token_mode`` selects the tokenizer used when raw text has to be
    produced or consumed for these sentences: "char" (one token per
    non-space character, for CJK-style text) or "latin" (whitespace plus
    punctuation splitting).
    """

    sentences: tuple[tuple[Sentence, tuple[EntitySpan, ...]], ...]
    scheme: LabelScheme
    token_mode: str = "char"
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.token_mode not in ("char", "latin"):
            raise DataError(f"unknown token_mode {self.token_mode!r}")
        for sent, spans in self.sentences:
            _check_spans(sent, spans, self.scheme)

    def __len__(self) -> int:
        return len(self.sentences)

    def entity_instances(self):
        """Yield (sentence, span) for every gold span, in corpus order."""
        for sent, spans in self.sentences:
            for span in spans:
                yield sent, span

    def num_entities(self) -> int:
        return sum(len(spans) for _, spans in self.sentences)

    def fingerprint(self) -> str:
        """Content hash over sentences and gold spans (not over warnings)."""
        h = hashlib.sha256()
        for sent, spans in self.sentences:
            h.update(sent.id.encode("utf-8"))
            h.update(b"\x00")
            for tok in sent.tokens:
                h.update(tok.text.encode("utf-8"))
                h.update(b"\x01")
            for span in spans:
                h.update(f"{span.start},{span.end},{span.etype}".encode("utf-8"))
                h.update(b"\x02")
        return h.hexdigest()


def _check_spans(sentence: Sentence, spans, scheme: LabelScheme) -> None:
    prev_end = -1
    prev = None
    for span in spans:
        if span.etype not in scheme.entity_types:
            raise DataError(
                f"sentence {sentence.id!r}: span type {span.etype!r} not in scheme"
            )
        if span.end > len(sentence):
            raise DataError(
                f"sentence {sentence.id!r}: span [{span.start}, {span.end}) exceeds n={len(sentence)}"
            )
        if span.start < prev_end:
            raise DataError(
                f"sentence {sentence.id!r}: overlapping/unsorted spans {prev} and {span}"
            )
        prev_end = span.end
        prev = span


class Vocab:
    """Token-to-id map with fixed reserved ids (PAD=0, UNK=1, MASK=2, BOS=3, EOS=4)."""

    def __init__(self, tokens):
        """``tokens`` are the non-reserved entries, in id order starting at 5."""
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._ids: dict[str, int] = {}
        for tok in RESERVED_TOKENS:
            self._ids[tok] = len(self._ids)
        for tok in self.tokens:
            if tok in self._ids:
                raise DataError(f"duplicate or reserved token in vocab: {tok!r}")
            self._ids[tok] = len(self._ids)

    def __len__(self) -> int:
        return NUM_RESERVED + len(self.tokens)

    def lookup(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def encode(self, texts) -> np.ndarray:
        return np.array([self.lookup(t) for t in texts], dtype=np.int64)

    def sha256(self) -> str:
        h = hashlib.sha256()
        for tok in self.tokens:
            h.update(tok.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


def tokenize(text: str, token_mode: str = "char") -> list[str]:
    """Split raw text into tokens: per-character for "char", whitespace plus
    punctuation for "latin"."""
    if token_mode == "char":
        return [c for c in text if not c.isspace()]
    if token_mode == "latin":
        return _LATIN_TOKEN_RE.findall(text)
    raise DataError(f"unknown token_mode {token_mode!r}")


def detokenize(texts, token_mode: str = "char") -> str:
    if token_mode == "char":
        return "".join(texts)
    if token_mode == "latin":
        return " ".join(texts)
    raise DataError(f"unknown token_mode {token_mode!r}")


def spans_to_bio(sentence: Sentence, spans, scheme: LabelScheme) -> TagSequence:
    """Encode spans as BIO tag indices: B at span start, I inside, O elsewhere."""
    ordered = sorted(spans)
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.end:
            raise DataError(f"overlapping spans {a} and {b}")
    tags = [scheme.tag_index("O")] * len(sentence)
    for span in ordered:
        if span.end > len(sentence):
            raise DataError(
                f"span [{span.start}, {span.end}) exceeds sentence length {len(sentence)}"
            )
        tags[span.start] = scheme.begin_index(span.etype)
        for i in range(span.start + 1, span.end):
            tags[i] = scheme.inside_index(span.etype)
    return TagSequence(tuple(tags))


def bio_to_spans(tags: TagSequence, scheme: LabelScheme) -> tuple[EntitySpan, ...]:
    """Decode BIO tag indices to spans.

    Maximal B-t (I-t)* runs become spans. An orphan I-t (not preceded by a
    same-type B-t or I-t) is repaired by treating it as B-t, so any tag
    sequence decodes.
    """
    spans: list[EntitySpan] = []
    start = None
    cur_type = None

    def close(end: int) -> None:
        nonlocal start, cur_type
        if start is not None:
            spans.append(EntitySpan(start, end, cur_type))
        start, cur_type = None, None

    for i, idx in enumerate(tags.tags):
        prefix, etype = scheme.split_tag(idx)
        if prefix == "O":
            close(i)
        elif prefix == "B":
            close(i)
            start, cur_type = i, etype
        else:  # I: continue same-type run, else repair to a new span
            if cur_type != etype:
                close(i)
                start, cur_type = i, etype
    close(len(tags.tags))
    return tuple(spans)


def bio_repair_positions(tags: TagSequence, scheme: LabelScheme) -> tuple[int, ...]:
    """Positions where bio_to_spans applies the orphan-I repair."""
    repaired = []
    prev_prefix, prev_type = "O", None
    for i, idx in enumerate(tags.tags):
        prefix, etype = scheme.split_tag(idx)
        if prefix == "I" and not (prev_prefix in ("B", "I") and prev_type == etype):
            repaired.append(i)
        prev_prefix, prev_type = prefix, etype
    return tuple(repaired)


def parse_dataset(text: str, token_mode: str = "char") -> Dataset:
    """Parse a column-formatted document: one ``<token>\\t<BIO-tag>`` per line,
    blank line between sentences, ``#`` at column 0 starts a comment.

    Illegal BIO transitions are repaired (orphan I promoted to B) and each
    repair is recorded in ``Dataset.warnings``.
    """
    sentences: list[tuple[Sentence, tuple[EntitySpan, ...]]] = []
    warnings: list[str] = []
    cur_tokens: list[str] = []
    cur_tags: list[str] = []
    seen_types: set[str] = set()
    pending: list[tuple[list[str], list[str], int]] = []

    def flush(line_no: int) -> None:
        if cur_tokens:
            pending.append((list(cur_tokens), list(cur_tags), line_no))
            cur_tokens.clear()
            cur_tags.clear()

    for line_no, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#"):
            continue
        if not line.strip():
            flush(line_no)
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not fields[0] or not fields[1]:
            raise DataError(
                f"line {line_no}: expected '<token>\\t<tag>', got {line!r}"
            )
        token, tag = fields
        if tag != "O" and not re.fullmatch(r"[BI]-.+", tag):
            raise DataError(f"line {line_no}: malformed BIO tag {tag!r}")
        cur_tokens.append(token)
        cur_tags.append(tag)
        if tag != "O":
            seen_types.add(tag.split("-", 1)[1])
    flush(-1)

    scheme = LabelScheme(sorted(seen_types))
    for i, (tokens, tag_names, _) in enumerate(pending):
        sid = f"s{i:05d}"
        sent = Sentence.from_texts(sid, tokens)
        tags = TagSequence(tuple(scheme.tag_index(t) for t in tag_names))
        for pos in bio_repair_positions(tags, scheme):
            warnings.append(
                f"sentence {sid}: orphan {tag_names[pos]!r} at token {pos} promoted to B"
            )
        spans = bio_to_spans(tags, scheme)
        sentences.append((sent, spans))

    return Dataset(tuple(sentences), scheme, token_mode, tuple(warnings))


def format_dataset(d: Dataset) -> str:
    """Inverse of parse_dataset (modulo comments and warnings)."""
    blocks = []
    for sent, spans in d.sentences:
        tags = spans_to_bio(sent, spans, d.scheme)
        lines = [
            f"{tok.text}\t{d.scheme.tag_name(idx)}"
            for tok, idx in zip(sent.tokens, tags.tags)
        ]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def split_dataset(d: Dataset, ratios, seed: int):
    """Deterministic seeded shuffle-and-partition into (train, val, test).

    Sizes are floor(N*r) with the flooring remainder assigned to train.
    """
    r = tuple(float(x) for x in ratios)
    if len(r) != 3 or any(x <= 0 for x in r):
        raise DataError(f"need three positive ratios, got {ratios}")
    if abs(sum(r) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(r)!r}")

    n = len(d)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    sizes = [int(np.floor(n * x)) for x in r]
    sizes[0] += n - sum(sizes)
    if n >= 3 and any(s == 0 for s in sizes):
        raise DataError(f"split of {n} sentences with ratios {r} leaves a part empty")

    parts = []
    offset = 0
    for size in sizes:
        idx = order[offset : offset + size]
        part = tuple(d.sentences[i] for i in idx)
        parts.append(Dataset(part, d.scheme, d.token_mode))
        offset += size
    return tuple(parts)


def build_vocab(corpora, min_count: int = 1) -> Vocab:
    """Build a Vocab from token streams.

    Tokens with frequency >= min_count get ids in descending-frequency order
    (ties broken lexicographically) after the reserved ids.
    """
    if min_count < 1:
        raise DataError(f"min_count must be >= 1, got {min_count}")
    counts: dict[str, int] = {}
    for stream in corpora:
        for tok in stream:
            counts[tok] = counts.get(tok, 0) + 1
    kept = [
        tok
        for tok, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if c >= min_count and tok not in RESERVED_TOKENS
    ]
    return Vocab(kept)
