"""Elucidation-corpus generation.

For every gold entity instance (sentence, span, type) a prompt is built from
one of three strategies and sent to an OpenAI-compatible chat-completions
endpoint; the assistant's reply becomes one corpus record. A deterministic
built-in mock stands in for the endpoint in tests and offline runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import requests

from .core import Dataset, EntitySpan, Sentence, derive_seed, detokenize

API_KEY_ENV = "COTE_API_KEY"

STRATEGY_VARIANTS = ("explain", "think", "role")

DEFAULT_TEMPLATES = {
    "explain": (
        "Sentence: {sentence}\n"
        "Explain in 2-3 sentences why '{span}' is an entity of type "
        "'{type}' in this sentence."
    ),
    "think": (
        "Sentence: {sentence}\n"
        "Reason step by step about why '{span}' is an entity of type "
        "'{type}' in this sentence, then conclude with the explanation."
    ),
    "role": (
        "Sentence: {sentence}\n"
        "Describe the functional role '{span}' (an entity of type '{type}') "
        "plays in the regulation described."
    ),
}


class CoteError(RuntimeError):
    pass


class TransientEndpointError(CoteError):
    """Network/timeout/5xx failure that survived every retry."""


class ContentError(CoteError):
    """The endpoint answered, but with unusable content."""


@dataclass(frozen=True)
class PromptStrategy:
    variant: str
    template: str

    def __post_init__(self):
        if self.variant not in STRATEGY_VARIANTS:
            raise CoteError(
                f"unknown strategy variant {self.variant!r}; "
                f"expected one of {STRATEGY_VARIANTS}"
            )
        for placeholder in ("{sentence}", "{span}", "{type}"):
            if self.template.count(placeholder) != 1:
                raise CoteError(
                    f"template must contain {placeholder} exactly once"
                )

    @staticmethod
    def default(variant: str) -> "PromptStrategy":
        if variant not in DEFAULT_TEMPLATES:
            raise CoteError(f"no default template for variant {variant!r}")
        return PromptStrategy(variant, DEFAULT_TEMPLATES[variant])


@dataclass(frozen=True)
class Prompt:
    text: str
    sentence_id: str
    span: EntitySpan
    etype: str
    variant: str

    def __post_init__(self):
        if not self.text.strip():
            raise CoteError("rendered prompt is empty")


@dataclass(frozen=True)
class CoteRecord:
    text: str
    sentence_id: str
    span_start: int
    span_end: int
    entity_type: str
    strategy: str
    model: str
    tokens: int
    finish_reason: str = "stop"

    def __post_init__(self):
        if not self.text.strip():
            raise CoteError("elucidation text is empty")
        if self.tokens < 1:
            raise CoteError(f"token count must be >= 1, got {self.tokens}")


@dataclass(frozen=True)
class CoteCorpus:
    records: tuple[CoteRecord, ...]
    strategy: str
    fingerprint: str

    def __post_init__(self):
        for rec in self.records:
            if rec.strategy != self.strategy:
                raise CoteError(
                    f"record strategy {rec.strategy!r} != corpus strategy {self.strategy!r}"
                )

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class ChatEndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "Qwen3-8B"
    temperature: float = 0.7
    max_tokens: int = 256
    timeout: float = 30.0
    max_parallel: int = 4
    retries: int = 2
    backoff: float = 0.5
    mock: bool = False

    def __post_init__(self):
        if self.max_parallel < 1:
            raise CoteError(f"max_parallel must be >= 1, got {self.max_parallel}")
        if self.retries < 0:
            raise CoteError(f"retries must be >= 0, got {self.retries}")


def build_prompt(
    strategy: PromptStrategy,
    sentence: Sentence,
    span: EntitySpan,
    etype: str,
    token_mode: str = "char",
) -> Prompt:
    """Substitute the sentence text, span surface, and type into the template."""
    if span.end > len(sentence):
        raise CoteError(
            f"span [{span.start}, {span.end}) out of bounds for sentence "
            f"{sentence.id!r} of length {len(sentence)}"
        )
    text = strategy.template.format(
        sentence=detokenize(sentence.texts, token_mode),
        span=span.surface(sentence, token_mode),
        type=etype,
    )
    return Prompt(text, sentence.id, span, etype, strategy.variant)


def mock_completion(sentence_text: str, span_text: str, etype: str) -> str:
    """Deterministic stand-in reply: E:{span}:{type}:{first 8 hex chars of
    the sentence hash}."""
    digest = hashlib.sha256(sentence_text.encode("utf-8")).hexdigest()[:8]
    return f"E:{span_text}:{etype}:{digest}"


def _post_chat(cfg: ChatEndpointConfig, prompt_text: str):
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(API_KEY_ENV, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = {
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt_text}],
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
    }
    return requests.post(url, json=body, headers=headers, timeout=cfg.timeout)


def request_elucidation(
    cfg: ChatEndpointConfig, prompt: Prompt, sentence: Sentence | None = None,
    token_mode: str = "char",
) -> CoteRecord:
    """One chat-completion round trip (or the mock transform) for one prompt.

    Transient failures (connection errors, timeouts, HTTP 429/5xx) are retried
    with exponential backoff up to the retry budget; anything else is a
    content error.
    """
    if cfg.mock:
        if sentence is None:
            raise CoteError("mock endpoint needs the source sentence")
        sent_text = detokenize(sentence.texts, token_mode)
        span_text = prompt.span.surface(sentence, token_mode)
        text = mock_completion(sent_text, span_text, prompt.etype)
        return CoteRecord(
            text=text,
            sentence_id=prompt.sentence_id,
            span_start=prompt.span.start,
            span_end=prompt.span.end,
            entity_type=prompt.etype,
            strategy=prompt.variant,
            model=f"mock:{cfg.model}",
            tokens=max(1, len(text.split())),
        )

    last_error = None
    for attempt in range(cfg.retries + 1):
        if attempt:
            time.sleep(cfg.backoff * (2 ** (attempt - 1)))
        try:
            resp = _post_chat(cfg, prompt.text)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_error = f"{type(exc).__name__}: {exc}"
            continue
        if resp.status_code == 429 or resp.status_code >= 500:
            last_error = f"HTTP {resp.status_code}"
            continue
        if resp.status_code != 200:
            raise ContentError(f"endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            text = choice["message"]["content"]
            finish = choice.get("finish_reason", "stop")
            usage = payload.get("usage", {})
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ContentError(f"malformed completion payload: {exc}") from exc
        if not isinstance(text, str) or not text.strip():
            raise ContentError("endpoint returned empty assistant text")
        tokens = usage.get("completion_tokens") or max(1, len(text.split()))
        return CoteRecord(
            text=text.strip(),
            sentence_id=prompt.sentence_id,
            span_start=prompt.span.start,
            span_end=prompt.span.end,
            entity_type=prompt.etype,
            strategy=prompt.variant,
            model=cfg.model,
            tokens=int(tokens),
        )
    raise TransientEndpointError(
        f"request failed after {cfg.retries + 1} attempts: {last_error}"
    )


@dataclass
class BuildSummary:
    requested: int = 0
    generated: int = 0
    skipped: int = 0
    total_tokens: int = 0
    errors: list[str] = field(default_factory=list)


def build_corpus(
    d: Dataset,
    strategy: PromptStrategy,
    cfg: ChatEndpointConfig,
    log_fn=None,
) -> tuple[CoteCorpus, BuildSummary]:
    """Generate one record per gold entity instance.

    Requests run up to cfg.max_parallel in flight; output order is by
    (sentence id, span start) regardless of completion order. Failed
    instances are skipped and counted; more than half failing aborts.
    """
    instances = sorted(
        d.entity_instances(), key=lambda pair: (pair[0].id, pair[1].start)
    )
    if not instances:
        raise CoteError("dataset contains no entity instances")

    summary = BuildSummary(requested=len(instances))

    def one(pair):
        sent, span = pair
        prompt = build_prompt(strategy, sent, span, span.etype, d.token_mode)
        return request_elucidation(cfg, prompt, sentence=sent, token_mode=d.token_mode)

    results: list[CoteRecord | None] = [None] * len(instances)
    with ThreadPoolExecutor(max_workers=cfg.max_parallel) as pool:
        futures = [pool.submit(one, pair) for pair in instances]
        for i, fut in enumerate(futures):
            try:
                results[i] = fut.result()
            except (TransientEndpointError, ContentError) as exc:
                summary.skipped += 1
                sent, span = instances[i]
                msg = f"skipped {sent.id}[{span.start}:{span.end}]: {exc}"
                summary.errors.append(msg)
                if log_fn is not None:
                    log_fn({"event": "cote_skip", "detail": msg})

    if summary.skipped * 2 > summary.requested:
        raise CoteError(
            f"{summary.skipped}/{summary.requested} requests failed; aborting. "
            f"first errors: {summary.errors[:3]}"
        )

    records = tuple(r for r in results if r is not None)
    summary.generated = len(records)
    summary.total_tokens = sum(r.tokens for r in records)
    corpus = CoteCorpus(records, strategy.variant, d.fingerprint())
    return corpus, summary


def subset_corpus(c: CoteCorpus, fraction: float, seed: int) -> CoteCorpus:
    """Seeded sample of ceil(fraction * |c|) records without replacement.

    Sampling takes a prefix of one seeded permutation, so subsets at the same
    seed are nested across fractions; records keep their original order.
    """
    if not (0.0 < fraction <= 1.0):
        raise CoteError(f"fraction must be in (0, 1], got {fraction}")
    n = len(c.records)
    take = int(np.ceil(fraction * n))
    perm = np.random.default_rng(derive_seed("cote-subset", seed)).permutation(n)
    chosen = np.sort(perm[:take])
    return CoteCorpus(tuple(c.records[i] for i in chosen), c.strategy, c.fingerprint)


CORPUS_FIELDS = (
    "text", "sentence_id", "span_start", "span_end",
    "entity_type", "strategy", "model", "tokens",
)


def save_corpus(path, c: CoteCorpus) -> None:
    """One JSON object per line; corpus-level provenance goes to a sidecar
    meta file next to the records."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in c.records:
            row = {name: getattr(rec, name) for name in CORPUS_FIELDS}
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    meta = {
        "strategy": c.strategy,
        "fingerprint": c.fingerprint,
        "records": len(c.records),
    }
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_corpus(path) -> CoteCorpus:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.append(CoteRecord(**{k: row[k] for k in CORPUS_FIELDS}))
            except (ValueError, KeyError) as exc:
                raise CoteError(f"{path}:{line_no}: bad corpus row: {exc}") from exc
    if not records:
        raise CoteError(f"{path}: empty corpus")
    strategy = records[0].strategy
    fingerprint = ""
    meta_path = str(path) + ".meta.json"
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        fingerprint = meta.get("fingerprint", "")
        strategy = meta.get("strategy", strategy)
    return CoteCorpus(tuple(records), strategy, fingerprint)
