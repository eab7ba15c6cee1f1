"""Optimization machinery and the NER fine-tuning loop.

AdamW applies decoupled weight decay directly to parameters; the linear
schedule scales a base rate down to zero with no warmup by default. During
fine-tuning the CRF tensors form their own optimizer group with a much
larger learning rate than the encoder group, each under its own schedule,
and the best checkpoint by validation strict Macro-F1 is retained.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from . import crf as crf_mod
from . import encoder as enc
from .core import (
    Dataset,
    EntitySpan,
    LabelScheme,
    Sentence,
    Vocab,
    bio_to_spans,
    derive_seed,
    spans_to_bio,
)
from .crf import CrfParams
from .evaluation import strict_match


class TrainError(ValueError):
    pass


class FinetuneDivergedError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    beta1: float
    beta2: float
    eps: float
    weight_decay: float


def init_adamw(
    tensors: dict[str, np.ndarray],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> OptimizerState:
    return OptimizerState(
        m={n: np.zeros_like(t) for n, t in tensors.items()},
        v={n: np.zeros_like(t) for n, t in tensors.items()},
        step=0,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
):
    """One AdamW update, in place: bias-corrected moments plus decoupled
    weight decay applied to the pre-update parameter values."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, param in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient for tensor {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        param -= lr * (update + state.weight_decay * param)
    return params, state


def linear_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 - step/total_steps); no warmup."""
    if total_steps == 0:
        raise TrainError("total_steps must be positive")
    if not (0 <= step <= total_steps):
        raise TrainError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)


def scheduled_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    return linear_schedule(step - warmup_steps, max(total_steps - warmup_steps, 1), base_lr)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 16
    encoder_lr: float = 5e-5
    crf_lr: float = 5e-1
    weight_decay: float = 0.01
    scheduler: str = "linear"
    warmup_steps: int = 0
    seed: int = 0
    patience: int = 10
    constrained_decode: bool = False
    boundary: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError(f"invalid epochs/batch_size: {self.epochs}/{self.batch_size}")
        # lr 0 freezes a group, which the optimizer-separation checks rely on
        if self.encoder_lr < 0 or self.crf_lr < 0:
            raise TrainError("learning rates must be non-negative")
        if self.patience < 1:
            raise TrainError(f"patience must be >= 1, got {self.patience}")
        if self.scheduler not in ("linear", "constant"):
            raise TrainError(f"unknown scheduler {self.scheduler!r}")


@dataclass
class NerModel:
    encoder: enc.EncoderParams
    crf: CrfParams
    scheme: LabelScheme
    vocab: Vocab
    constrained: bool = False
    token_mode: str = "char"

    def __post_init__(self):
        if self.encoder.config.num_tags != self.scheme.num_tags:
            raise TrainError(
                f"emission head width {self.encoder.config.num_tags} != "
                f"tag set size {self.scheme.num_tags}"
            )
        if self.crf.num_tags != self.scheme.num_tags:
            raise TrainError("CRF dimension does not match the tag set")


def _lr_at(cfg: FinetuneConfig, step: int, total: int, base: float) -> float:
    if cfg.scheduler == "constant":
        return base
    return scheduled_lr(step, total, base, cfg.warmup_steps)


def finetune(
    pretrained: enc.EncoderParams,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: FinetuneConfig,
    vocab: Vocab,
    log_fn=None,
) -> NerModel:
    """Fine-tune the encoder plus a fresh zero-initialized CRF on NER.

    Two AdamW groups: CRF tensors at cfg.crf_lr, all encoder tensors at
    cfg.encoder_lr, each under its own schedule. After every epoch the
    validation strict Macro-F1 decides the retained checkpoint; training
    stops early after ``patience`` epochs without improvement.
    """
    if train_ds.scheme != val_ds.scheme:
        raise TrainError("train and validation datasets use different schemes")
    if len(train_ds) == 0:
        raise TrainError("empty training dataset")
    scheme = train_ds.scheme
    if pretrained.config.num_tags != scheme.num_tags:
        raise TrainError(
            f"encoder emission head has {pretrained.config.num_tags} tags, "
            f"dataset scheme needs {scheme.num_tags}"
        )

    params = pretrained.copy()
    crf_params = CrfParams.zeros(scheme.num_tags, boundary=cfg.boundary)

    enc_group = params.tensors()
    crf_group = crf_params.tensors()
    enc_state = init_adamw(enc_group, weight_decay=cfg.weight_decay)
    crf_state = init_adamw(crf_group, weight_decay=cfg.weight_decay)

    encoded = [
        (vocab.encode(sent.texts), spans_to_bio(sent, spans, scheme))
        for sent, spans in train_ds.sentences
    ]
    n_train = len(encoded)
    batches_per_epoch = (n_train + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch

    best = None  # (macro_f1, encoder copy, crf copy)
    bad_epochs = 0
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        order = np.random.default_rng(
            derive_seed("ft-shuffle", cfg.seed, epoch)
        ).permutation(n_train)
        epoch_nll = 0.0
        lr_e = lr_c = 0.0
        for b, lo in enumerate(range(0, n_train, cfg.batch_size)):
            batch = order[lo : lo + cfg.batch_size]
            grads_enc = params.zero_grads()
            grads_crf = {n: np.zeros_like(t) for n, t in crf_group.items()}
            scale = 1.0 / len(batch)
            batch_loss = 0.0
            for k, si in enumerate(batch):
                ids, y = encoded[si]
                cache = enc.forward(
                    params, ids, train_mode=True,
                    seed=derive_seed("ft-drop", cfg.seed, epoch, b, k),
                )
                E = enc.emissions(params, cache.hidden)
                loss, grad_e, grad_crf = crf_mod.crf_nll(E, crf_params, y)
                batch_loss += loss
                enc.backward(params, cache, d_emissions=grad_e * scale, grads=grads_enc)
                grads_crf["crf.trans"] += grad_crf.trans * scale
                if cfg.boundary:
                    grads_crf["crf.start"] += grad_crf.start * scale
                    grads_crf["crf.end"] += grad_crf.end * scale
            if not np.isfinite(batch_loss):
                raise FinetuneDivergedError(
                    f"non-finite NLL at epoch {epoch} batch {b}; "
                    f"|trans|={np.abs(crf_params.trans).max():.3g}"
                )
            lr_e = _lr_at(cfg, step, total_steps, cfg.encoder_lr)
            lr_c = _lr_at(cfg, step, total_steps, cfg.crf_lr)
            adamw_step(enc_group, grads_enc, enc_state, lr_e)
            adamw_step(crf_group, grads_crf, crf_state, lr_c)
            step += 1
            epoch_nll += batch_loss

        candidate = NerModel(
            params, crf_params, scheme, vocab,
            constrained=cfg.constrained_decode, token_mode=train_ds.token_mode,
        )
        val_f1 = _validation_macro_f1(candidate, val_ds)
        if log_fn is not None:
            log_fn({
                "epoch": epoch,
                "train_nll": epoch_nll / n_train,
                "val_macro_f1": val_f1,
                "lr_encoder": lr_e,
                "lr_crf": lr_c,
                "wall_ms": int((time.monotonic() - t0) * 1000),
            })
        if best is None or val_f1 > best[0]:
            best = (val_f1, params.copy(), crf_params.copy())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    return NerModel(
        best[1], best[2], scheme, vocab,
        constrained=cfg.constrained_decode, token_mode=train_ds.token_mode,
    )


def _validation_macro_f1(model: NerModel, val_ds: Dataset) -> float:
    gold = {sent.id: list(spans) for sent, spans in val_ds.sentences}
    pred = {sent.id: list(predict(model, sent)) for sent, _ in val_ds.sentences}
    report = strict_match(gold, pred, val_ds.scheme)
    return report.macro_f1 if report.per_type else 0.0


def predict(m: NerModel, sentence: Sentence) -> list[EntitySpan]:
    """Deterministic inference: encode, project to emissions, Viterbi-decode
    (BIO-constrained when the model says so), then read spans off the tags."""
    if len(sentence) > m.encoder.config.maxlen:
        raise TrainError(
            f"sentence {sentence.id!r} has {len(sentence)} tokens, exceeding "
            f"maxlen {m.encoder.config.maxlen}; split it into chunks of at "
            f"most maxlen tokens and predict each chunk separately"
        )
    ids = m.vocab.encode(sentence.texts)
    hidden = enc.encode(m.encoder, ids, train_mode=False)
    E = enc.emissions(m.encoder, hidden)
    if m.constrained:
        tags, _ = crf_mod.constrained_viterbi(E, m.crf, m.scheme)
    else:
        tags, _ = crf_mod.viterbi(E, m.crf)
    return list(bio_to_spans(tags, m.scheme))


def predict_dataset(m: NerModel, ds: Dataset) -> dict[str, list[EntitySpan]]:
    return {sent.id: predict(m, sent) for sent, _ in ds.sentences}


def save_model(path, m: NerModel, seed_lineage) -> None:
    """Encoder checkpoint container extended with the CRF tensors and header
    entries for the scheme, vocabulary (plus its hash), and decode mode."""
    header = {
        "kind": "ner-model",
        "config": asdict(m.encoder.config),
        "seed_lineage": list(seed_lineage),
        "scheme": list(m.scheme.entity_types),
        "vocab": list(m.vocab.tokens),
        "vocab_sha256": m.vocab.sha256(),
        "decode": {"constrained": m.constrained, "boundary": m.crf.boundary},
        "token_mode": m.token_mode,
    }
    tensors = dict(m.encoder.tensors())
    tensors.update(m.crf.tensors())
    enc.write_container(path, header, tensors)


def load_model(path) -> NerModel:
    header, tensors = enc.read_container(path)
    if header.get("kind") != "ner-model":
        raise enc.CheckpointError(
            f"not a model checkpoint: kind={header.get('kind')!r}"
        )
    cfg = enc.EncoderConfig.from_dict(header["config"])
    params = enc.EncoderParams(cfg, *(tensors[n] for n in enc.ENCODER_TENSOR_ORDER))
    boundary = header["decode"]["boundary"]
    crf_params = CrfParams(
        tensors["crf.trans"],
        tensors.get("crf.start") if boundary else None,
        tensors.get("crf.end") if boundary else None,
    )
    return NerModel(
        params,
        crf_params,
        LabelScheme(header["scheme"]),
        Vocab(header["vocab"]),
        constrained=header["decode"]["constrained"],
        token_mode=header.get("token_mode", "char"),
    )
