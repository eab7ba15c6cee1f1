"""Compact trainable token encoder with analytic gradients.

Each position's hidden state is a tanh-squashed affine mix of the token
embeddings (plus position embeddings) in a +-r window around it;
out-of-range neighbors fall back to the PAD embedding. Two affine heads
sit on top of the hidden states: MLM logits over the vocabulary and
emission scores over the tag set. Everything is plain numpy with manual
backward passes, so the whole model is differentiable without a framework.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .core import PAD

CONTAINER_MAGIC = b"AENC"
CONTAINER_VERSION = 1


class EncoderError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    radius: int = 2
    hidden: int = 128
    num_tags: int = 3
    dropout: float = 0.1
    maxlen: int = 256

    def __post_init__(self):
        if self.vocab_size < 1 or self.dim < 1 or self.hidden < 1 or self.num_tags < 1:
            raise EncoderError(f"invalid config sizes: {self}")
        if self.radius < 0:
            raise EncoderError(f"radius must be >= 0, got {self.radius}")
        if not (0.0 <= self.dropout < 1.0):
            raise EncoderError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.maxlen < 1:
            raise EncoderError(f"maxlen must be >= 1, got {self.maxlen}")

    @property
    def window(self) -> int:
        return 2 * self.radius + 1

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(**d)


# Tensor names in declaration (checkpoint) order.
ENCODER_TENSOR_ORDER = (
    "token_emb",
    "pos_emb",
    "mix_w",
    "mix_b",
    "mlm_w",
    "mlm_b",
    "emit_w",
    "emit_b",
)


@dataclass
class EncoderParams:
    config: EncoderConfig
    token_emb: np.ndarray  # vocab x d
    pos_emb: np.ndarray    # maxlen x d
    mix_w: np.ndarray      # (2r+1)d x h
    mix_b: np.ndarray      # h
    mlm_w: np.ndarray      # h x vocab
    mlm_b: np.ndarray      # vocab
    emit_w: np.ndarray     # h x num_tags
    emit_b: np.ndarray     # num_tags

    def __post_init__(self):
        cfg = self.config
        expected = {
            "token_emb": (cfg.vocab_size, cfg.dim),
            "pos_emb": (cfg.maxlen, cfg.dim),
            "mix_w": (cfg.window * cfg.dim, cfg.hidden),
            "mix_b": (cfg.hidden,),
            "mlm_w": (cfg.hidden, cfg.vocab_size),
            "mlm_b": (cfg.vocab_size,),
            "emit_w": (cfg.hidden, cfg.num_tags),
            "emit_b": (cfg.num_tags,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise EncoderError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise EncoderError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ENCODER_TENSOR_ORDER}

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config, *(getattr(self, n).copy() for n in ENCODER_TENSOR_ORDER)
        )

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(getattr(self, n)) for n in ENCODER_TENSOR_ORDER}


def init_params(cfg: EncoderConfig, seed: int) -> EncoderParams:
    """Seeded uniform(-0.05, 0.05) weights, zero biases, zero PAD embedding row."""
    rng = np.random.default_rng(seed)

    def draw(*shape):
        return rng.uniform(-0.05, 0.05, size=shape)

    token_emb = draw(cfg.vocab_size, cfg.dim)
    token_emb[PAD] = 0.0
    return EncoderParams(
        config=cfg,
        token_emb=token_emb,
        pos_emb=draw(cfg.maxlen, cfg.dim),
        mix_w=draw(cfg.window * cfg.dim, cfg.hidden),
        mix_b=np.zeros(cfg.hidden),
        mlm_w=draw(cfg.hidden, cfg.vocab_size),
        mlm_b=np.zeros(cfg.vocab_size),
        emit_w=draw(cfg.hidden, cfg.num_tags),
        emit_b=np.zeros(cfg.num_tags),
    )


@dataclass
class EncodeCache:
    """Activations saved by forward() for the matching backward() call."""

    ids: np.ndarray          # n
    neighbor: np.ndarray     # n x window, clipped neighbor indices
    valid: np.ndarray        # n x window bool, False where out of range
    window_x: np.ndarray     # n x window*d
    act: np.ndarray          # n x h, tanh output before dropout
    drop_mask: np.ndarray | None  # n x h inverted-dropout mask, or None
    hidden: np.ndarray       # n x h


def forward(
    p: EncoderParams, ids, train_mode: bool = False, seed: int = 0
) -> EncodeCache:
    cfg = p.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] < 1:
        raise EncoderError(f"ids must be a non-empty 1-D sequence, got {ids.shape}")
    n = ids.shape[0]
    if n > cfg.maxlen:
        raise EncoderError(f"sequence length {n} exceeds maxlen {cfg.maxlen}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise EncoderError("token id out of vocabulary range")

    offsets = np.arange(-cfg.radius, cfg.radius + 1)
    neighbor = np.arange(n)[:, None] + offsets[None, :]
    valid = (neighbor >= 0) & (neighbor < n)
    clipped = np.clip(neighbor, 0, n - 1)

    per_pos = p.token_emb[ids] + p.pos_emb[:n]          # n x d
    window = np.where(
        valid[:, :, None], per_pos[clipped], p.token_emb[PAD][None, None, :]
    )
    window_x = window.reshape(n, cfg.window * cfg.dim)

    act = np.tanh(window_x @ p.mix_w + p.mix_b)
    drop_mask = None
    if train_mode and cfg.dropout > 0.0:
        rng = np.random.default_rng(seed)
        keep = rng.random(act.shape) >= cfg.dropout
        drop_mask = keep / (1.0 - cfg.dropout)
        hidden = act * drop_mask
    else:
        hidden = act
    return EncodeCache(ids, clipped, valid, window_x, act, drop_mask, hidden)


def encode(
    p: EncoderParams, ids, train_mode: bool = False, seed: int = 0
) -> np.ndarray:
    """Hidden state matrix (n x h) for a token-id sequence."""
    return forward(p, ids, train_mode, seed).hidden


def mlm_logits(p: EncoderParams, hidden: np.ndarray) -> np.ndarray:
    hidden = _check_hidden(p, hidden)
    return hidden @ p.mlm_w + p.mlm_b


def emissions(p: EncoderParams, hidden: np.ndarray) -> np.ndarray:
    hidden = _check_hidden(p, hidden)
    return hidden @ p.emit_w + p.emit_b


def _check_hidden(p: EncoderParams, hidden) -> np.ndarray:
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[1] != p.config.hidden:
        raise EncoderError(
            f"hidden must be n x {p.config.hidden}, got shape {hidden.shape}"
        )
    return hidden


def backward(
    p: EncoderParams,
    cache: EncodeCache,
    d_mlm_logits: np.ndarray | None = None,
    d_emissions: np.ndarray | None = None,
    d_hidden: np.ndarray | None = None,
    grads: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Accumulate exact parameter gradients for the composed loss.

    Upstream gradients may come in at the MLM head, the emission head, the
    raw hidden states, or any combination; contributions are summed. When
    ``grads`` is given, gradients are accumulated into it in place.
    """
    cfg = p.config
    n = cache.ids.shape[0]
    if grads is None:
        grads = p.zero_grads()

    dh = np.zeros((n, cfg.hidden))
    if d_hidden is not None:
        d_hidden = np.asarray(d_hidden, dtype=np.float64)
        if d_hidden.shape != (n, cfg.hidden):
            raise EncoderError(f"d_hidden shape {d_hidden.shape} != {(n, cfg.hidden)}")
        dh += d_hidden
    if d_mlm_logits is not None:
        d_mlm_logits = np.asarray(d_mlm_logits, dtype=np.float64)
        if d_mlm_logits.shape != (n, cfg.vocab_size):
            raise EncoderError(
                f"d_mlm_logits shape {d_mlm_logits.shape} != {(n, cfg.vocab_size)}"
            )
        grads["mlm_w"] += cache.hidden.T @ d_mlm_logits
        grads["mlm_b"] += d_mlm_logits.sum(axis=0)
        dh += d_mlm_logits @ p.mlm_w.T
    if d_emissions is not None:
        d_emissions = np.asarray(d_emissions, dtype=np.float64)
        if d_emissions.shape != (n, cfg.num_tags):
            raise EncoderError(
                f"d_emissions shape {d_emissions.shape} != {(n, cfg.num_tags)}"
            )
        grads["emit_w"] += cache.hidden.T @ d_emissions
        grads["emit_b"] += d_emissions.sum(axis=0)
        dh += d_emissions @ p.emit_w.T

    if cache.drop_mask is not None:
        dh = dh * cache.drop_mask
    dz = dh * (1.0 - cache.act**2)

    grads["mix_w"] += cache.window_x.T @ dz
    grads["mix_b"] += dz.sum(axis=0)

    dx = (dz @ p.mix_w.T).reshape(n, cfg.window, cfg.dim)
    valid = cache.valid
    neighbor = cache.neighbor
    # In-range slots feed the neighbor's token and position embeddings;
    # out-of-range slots feed the PAD embedding row only.
    tok_targets = np.where(valid, cache.ids[neighbor], PAD)
    np.add.at(grads["token_emb"], tok_targets.ravel(), dx.reshape(-1, cfg.dim))
    pos_targets = neighbor[valid]
    np.add.at(grads["pos_emb"], pos_targets, dx[valid])
    return grads


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Binary checkpoint: magic, header length, JSON header, then raw
    little-endian float32 tensors in declaration order."""
    header = dict(header)
    header["format_version"] = CONTAINER_VERSION
    header["tensors"] = [
        {"name": name, "shape": list(arr.shape)} for name, arr in tensors.items()
    ]
    blob = _header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CONTAINER_MAGIC:
            raise CheckpointError(
                f"bad checkpoint magic {magic!r}, expected {CONTAINER_MAGIC!r}"
            )
        (length,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        version = header.get("format_version")
        if version != CONTAINER_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version!r}, expected {CONTAINER_VERSION}"
            )
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError(f"truncated tensor {entry['name']!r}")
            tensors[entry["name"]] = (
                np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            )
    return header, tensors


def save_encoder(path, p: EncoderParams, seed_lineage, extra_header: dict | None = None):
    header = {
        "kind": "encoder",
        "config": asdict(p.config),
        "seed_lineage": list(seed_lineage),
    }
    if extra_header:
        header.update(extra_header)
    write_container(path, header, p.tensors())


def load_encoder(path) -> tuple[EncoderParams, dict]:
    header, tensors = read_container(path)
    if header.get("kind") not in ("encoder", "ner-model"):
        raise CheckpointError(f"not an encoder checkpoint: kind={header.get('kind')!r}")
    cfg = EncoderConfig.from_dict(header["config"])
    missing = [n for n in ENCODER_TENSOR_ORDER if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {missing}")
    params = EncoderParams(cfg, *(tensors[n] for n in ENCODER_TENSOR_ORDER))
    return params, header
