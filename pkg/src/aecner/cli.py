"""Command-line orchestration of the three-stage pipeline.

Subcommands: generate-cote, pretrain, finetune, evaluate, ablate, scale,
predict. Values resolve as flag > config file > built-in default. Logs are
line-delimited JSON on stderr; primary artifacts go only to declared paths;
failures exit nonzero with a single `error_code: message` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import cote as cote_mod
from . import crf as crf_mod  # noqa: F401  (re-exported for scripting convenience)
from . import encoder as enc
from . import evaluation as ev
from . import mlm as mlm_mod
from . import train as train_mod
from .core import (
    DataError,
    Dataset,
    Sentence,
    Vocab,
    build_vocab,
    parse_dataset,
    split_dataset,
    tokenize,
)
from .cote import ChatEndpointConfig, CoteError, PromptStrategy
from .encoder import CheckpointError, EncoderConfig
from .mlm import PretrainConfig
from .train import FinetuneConfig

SPLIT_RATIOS = (0.8, 0.1, 0.1)
SCALE_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


class CliError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage_error", message)


def log_event(**fields) -> None:
    print(json.dumps(fields, sort_keys=True, default=str), file=sys.stderr)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliError("io_error", f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError("config_error", f"bad config file {path}: {exc}")
    if not isinstance(cfg, dict):
        raise CliError("config_error", f"config file {path} must hold a JSON object")
    return cfg


def _resolve(flag_value, file_cfg: dict, key: str, default):
    """flag beats file beats default; nested keys use dots."""
    if flag_value is not None:
        return flag_value
    node = file_cfg
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _require_file(path, what: str) -> str:
    if path is None:
        raise CliError("config_error", f"missing required {what} path")
    if not os.path.exists(path):
        raise CliError("io_error", f"{what} not found: {path}")
    return path


def _read_dataset(path, token_mode: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_dataset(fh.read(), token_mode)


def _out_path(args, file_cfg, name: str) -> str:
    out_dir = _resolve(args.out_dir, file_cfg, "out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _endpoint_config(args, file_cfg) -> ChatEndpointConfig:
    cfg = ChatEndpointConfig(
        base_url=_resolve(args.endpoint, file_cfg, "endpoint.base_url",
                          ChatEndpointConfig.base_url),
        model=_resolve(args.model, file_cfg, "endpoint.model",
                       ChatEndpointConfig.model),
        temperature=_resolve(args.temperature, file_cfg, "endpoint.temperature",
                             ChatEndpointConfig.temperature),
        max_tokens=_resolve(args.max_tokens, file_cfg, "endpoint.max_tokens",
                            ChatEndpointConfig.max_tokens),
        timeout=_resolve(None, file_cfg, "endpoint.timeout",
                         ChatEndpointConfig.timeout),
        max_parallel=_resolve(args.max_parallel, file_cfg, "endpoint.max_parallel",
                              ChatEndpointConfig.max_parallel),
        retries=_resolve(args.retries, file_cfg, "endpoint.retries",
                         ChatEndpointConfig.retries),
        mock=bool(args.mock or _resolve(None, file_cfg, "endpoint.mock", False)),
    )
    return cfg


def _encoder_config(args, file_cfg, vocab_size: int, num_tags: int) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=vocab_size,
        dim=_resolve(getattr(args, "dim", None), file_cfg, "encoder.dim", 64),
        radius=_resolve(getattr(args, "radius", None), file_cfg, "encoder.radius", 2),
        hidden=_resolve(getattr(args, "hidden", None), file_cfg, "encoder.hidden", 128),
        num_tags=num_tags,
        dropout=_resolve(getattr(args, "dropout", None), file_cfg, "encoder.dropout", 0.1),
        maxlen=_resolve(getattr(args, "maxlen", None), file_cfg, "encoder.maxlen", 256),
    )


def _pretrain_config(args, file_cfg, seed: int, token_mode: str) -> PretrainConfig:
    return PretrainConfig(
        epochs=_resolve(args.epochs, file_cfg, "pretrain.epochs", 5),
        batch_size=_resolve(args.batch_size, file_cfg, "pretrain.batch_size", 16),
        learning_rate=_resolve(args.lr, file_cfg, "pretrain.learning_rate", 5e-5),
        weight_decay=_resolve(None, file_cfg, "pretrain.weight_decay", 0.01),
        mask_ratio=_resolve(args.mask_ratio, file_cfg, "pretrain.mask_ratio", 0.15),
        seed=seed,
        token_mode=token_mode,
    )


def _finetune_config(args, file_cfg, seed: int) -> FinetuneConfig:
    return FinetuneConfig(
        epochs=_resolve(args.epochs, file_cfg, "finetune.epochs", 10),
        batch_size=_resolve(args.batch_size, file_cfg, "finetune.batch_size", 16),
        encoder_lr=_resolve(args.encoder_lr, file_cfg, "finetune.encoder_lr", 5e-5),
        crf_lr=_resolve(args.crf_lr, file_cfg, "finetune.crf_lr", 5e-1),
        weight_decay=_resolve(None, file_cfg, "finetune.weight_decay", 0.01),
        patience=_resolve(args.patience, file_cfg, "finetune.patience", 10),
        seed=seed,
        constrained_decode=bool(
            args.constrained or _resolve(None, file_cfg, "finetune.constrained", False)
        ),
    )


def _seed(args, file_cfg) -> int:
    return int(_resolve(args.seed, file_cfg, "seed", 0))


def _token_mode(args, file_cfg) -> str:
    return _resolve(args.token_mode, file_cfg, "token_mode", "char")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, ensure_ascii=False)
        fh.write("\n")


def _runlog_writer(path: str):
    fh = open(path, "w", encoding="utf-8")

    def write(entry: dict) -> None:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
        fh.flush()
        log_event(**entry)

    return fh, write


# ---------------------------------------------------------------- commands


def cmd_generate_cote(args) -> int:
    file_cfg = _load_config_file(args.config)
    token_mode = _token_mode(args, file_cfg)
    dataset_path = _require_file(
        args.dataset or _resolve(None, file_cfg, "dataset", None), "dataset"
    )
    d = _read_dataset(dataset_path, token_mode)
    variant = _resolve(args.strategy, file_cfg, "strategy", "explain")
    template = _resolve(None, file_cfg, f"templates.{variant}", None)
    strategy = (
        PromptStrategy(variant, template) if template else PromptStrategy.default(variant)
    )
    endpoint = _endpoint_config(args, file_cfg)

    corpus, summary = cote_mod.build_corpus(d, strategy, endpoint, log_fn=log_event)
    out = args.out or _out_path(args, file_cfg, f"cote-{variant}.jsonl")
    cote_mod.save_corpus(out, corpus)
    print(json.dumps({
        "corpus": out,
        "strategy": variant,
        "records": summary.generated,
        "skipped": summary.skipped,
        "total_tokens": summary.total_tokens,
    }, sort_keys=True))
    return 0


def _load_corpus_maybe_subset(args, file_cfg, seed: int):
    corpus_path = _require_file(
        args.corpus or _resolve(None, file_cfg, "corpus", None), "corpus"
    )
    corpus = cote_mod.load_corpus(corpus_path)
    fraction = _resolve(args.corpus_fraction, file_cfg, "pretrain.corpus_fraction", 1.0)
    if fraction != 1.0:
        corpus = cote_mod.subset_corpus(corpus, fraction, seed)
    return corpus


def _pretrain_once(args, file_cfg, d: Dataset, corpus, seed: int, token_mode: str,
                   runlog_write=None) -> tuple[enc.EncoderParams, Vocab]:
    """Shared stage-2 body for pretrain/ablate/scale."""
    pcfg = _pretrain_config(args, file_cfg, seed, token_mode)
    resume = getattr(args, "resume", None)
    if resume:
        params, header = enc.load_encoder(_require_file(resume, "checkpoint"))
        vocab = Vocab(header["vocab"])
        if header.get("scheme") != list(d.scheme.entity_types):
            raise CliError(
                "data_error",
                f"checkpoint scheme {header.get('scheme')} != dataset scheme "
                f"{list(d.scheme.entity_types)}",
            )
    else:
        streams = [
            tokenize(rec.text, token_mode) for rec in corpus.records
        ] + [list(sent.texts) for sent, _ in d.sentences]
        vocab = build_vocab(streams, min_count=1)
        cfg = _encoder_config(args, file_cfg, len(vocab), d.scheme.num_tags)
        params = enc.init_params(cfg, seed)
    trained = mlm_mod.pretrain(corpus, params, pcfg, vocab, log_fn=runlog_write or log_event)
    return trained, vocab


def cmd_pretrain(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _seed(args, file_cfg)
    token_mode = _token_mode(args, file_cfg)
    dataset_path = _require_file(
        args.dataset or _resolve(None, file_cfg, "dataset", None), "dataset"
    )
    d = _read_dataset(dataset_path, token_mode)
    corpus = _load_corpus_maybe_subset(args, file_cfg, seed)

    runlog_path = _out_path(args, file_cfg, "pretrain-runlog.jsonl")
    fh, write = _runlog_writer(runlog_path)
    try:
        params, vocab = _pretrain_once(args, file_cfg, d, corpus, seed, token_mode, write)
    finally:
        fh.close()

    out = args.out or _out_path(args, file_cfg, "encoder.ckpt")
    enc.save_encoder(out, params, seed_lineage=[seed], extra_header={
        "scheme": list(d.scheme.entity_types),
        "vocab": list(vocab.tokens),
        "vocab_sha256": vocab.sha256(),
        "token_mode": token_mode,
        "corpus_fingerprint": corpus.fingerprint,
    })
    print(json.dumps({"checkpoint": out, "runlog": runlog_path}, sort_keys=True))
    return 0


def _finetune_on_splits(args, file_cfg, d: Dataset, seed: int,
                        pretrained: enc.EncoderParams | None, vocab: Vocab | None,
                        runlog_write=None):
    """Split 8:1:1, fine-tune, and evaluate the retained model on test."""
    train_ds, val_ds, test_ds = split_dataset(d, SPLIT_RATIOS, seed)
    fcfg = _finetune_config(args, file_cfg, seed)
    if pretrained is None:
        vocab = build_vocab([list(s.texts) for s, _ in d.sentences], min_count=1)
        cfg = _encoder_config(args, file_cfg, len(vocab), d.scheme.num_tags)
        pretrained = enc.init_params(cfg, seed)
    model = train_mod.finetune(
        pretrained, train_ds, val_ds, fcfg, vocab, log_fn=runlog_write or log_event
    )
    gold = {s.id: list(spans) for s, spans in test_ds.sentences}
    pred = train_mod.predict_dataset(model, test_ds)
    strict = ev.strict_match(gold, pred, d.scheme)
    partial = ev.partial_match(gold, pred, d.scheme)
    return model, strict, partial


def cmd_finetune(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _seed(args, file_cfg)
    token_mode = _token_mode(args, file_cfg)
    dataset_path = _require_file(
        args.dataset or _resolve(None, file_cfg, "dataset", None), "dataset"
    )
    d = _read_dataset(dataset_path, token_mode)

    pretrained = vocab = None
    if not args.no_pretrain:
        ckpt = args.checkpoint or _resolve(None, file_cfg, "checkpoint", None)
        if ckpt is None:
            raise CliError(
                "config_error", "finetune needs --checkpoint or --no-pretrain"
            )
        pretrained, header = enc.load_encoder(_require_file(ckpt, "checkpoint"))
        if header.get("scheme") != list(d.scheme.entity_types):
            raise CliError(
                "data_error",
                f"checkpoint scheme {header.get('scheme')} != dataset scheme "
                f"{list(d.scheme.entity_types)}",
            )
        vocab = Vocab(header["vocab"])
        token_mode = header.get("token_mode", token_mode)

    runlog_path = _out_path(args, file_cfg, "finetune-runlog.jsonl")
    fh, write = _runlog_writer(runlog_path)
    try:
        model, strict, partial = _finetune_on_splits(
            args, file_cfg, d, seed, pretrained, vocab, write
        )
    finally:
        fh.close()

    model_path = args.out or _out_path(args, file_cfg, "model.ckpt")
    train_mod.save_model(model_path, model, seed_lineage=[seed])
    name = _resolve(args.name, file_cfg, "name", "model")
    text, payload = ev.emit_report([(name, {"strict": strict, "partial": partial})])
    report_path = _out_path(args, file_cfg, "report.json")
    _write_json(report_path, payload)
    sys.stdout.write(text)
    print(json.dumps({"model": model_path, "report": report_path}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    file_cfg = _load_config_file(args.config)
    token_mode = _token_mode(args, file_cfg)
    dataset_path = _require_file(
        args.dataset or _resolve(None, file_cfg, "dataset", None), "dataset"
    )
    d = _read_dataset(dataset_path, token_mode)
    pred_path = _require_file(args.predictions, "predictions")
    pred = ev.load_predictions(pred_path)

    by_id = {s.id: list(spans) for s, spans in d.sentences}
    unknown = sorted(set(pred) - set(by_id))
    if unknown:
        raise CliError(
            "data_error", f"predictions reference unknown sentence ids: {unknown[:5]}"
        )
    gold = {sid: by_id[sid] for sid in pred}
    strict = ev.strict_match(gold, pred, d.scheme)
    partial = ev.partial_match(gold, pred, d.scheme)
    name = _resolve(args.name, file_cfg, "name", "predictions")
    text, payload = ev.emit_report([(name, {"strict": strict, "partial": partial})])
    report_path = args.out or _out_path(args, file_cfg, "report.json")
    _write_json(report_path, payload)
    sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _seed(args, file_cfg)
    token_mode = _token_mode(args, file_cfg)
    dataset_path = _require_file(
        args.dataset or _resolve(None, file_cfg, "dataset", None), "dataset"
    )
    d = _read_dataset(dataset_path, token_mode)

    corpus_paths = {
        "explain": args.corpus_explain or _resolve(None, file_cfg, "corpora.explain", None),
        "think": args.corpus_think or _resolve(None, file_cfg, "corpora.think", None),
        "role": args.corpus_role or _resolve(None, file_cfg, "corpora.role", None),
    }
    missing = [v for v, p in corpus_paths.items() if p is None or not os.path.exists(p)]
    if missing:
        raise CliError("io_error", f"missing corpus for variants: {missing}")

    rows = []
    for variant in ("explain", "think", "role"):
        corpus = cote_mod.load_corpus(corpus_paths[variant])
        pretrained, vocab = _pretrain_once(args, file_cfg, d, corpus, seed, token_mode)
        _, strict, partial = _finetune_on_splits(
            args, file_cfg, d, seed, pretrained, vocab
        )
        rows.append((variant, {"strict": strict, "partial": partial}))

    text, payload = ev.emit_report(rows)
    report_path = _out_path(args, file_cfg, "ablation.json")
    _write_json(report_path, payload)
    sys.stdout.write(text)
    return 0


def cmd_scale(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _seed(args, file_cfg)
    token_mode = _token_mode(args, file_cfg)
    dataset_path = _require_file(
        args.dataset or _resolve(None, file_cfg, "dataset", None), "dataset"
    )
    d = _read_dataset(dataset_path, token_mode)
    corpus_path = _require_file(
        args.corpus or _resolve(None, file_cfg, "corpus", None), "corpus"
    )
    full = cote_mod.load_corpus(corpus_path)

    fractions = SCALE_FRACTIONS
    if args.fractions:
        fractions = tuple(float(x) for x in args.fractions.split(","))

    rows = []
    for fraction in fractions:
        corpus = cote_mod.subset_corpus(full, fraction, seed)
        pretrained, vocab = _pretrain_once(args, file_cfg, d, corpus, seed, token_mode)
        _, strict, _ = _finetune_on_splits(args, file_cfg, d, seed, pretrained, vocab)
        rows.append({
            "fraction": fraction,
            "records": len(corpus),
            "strict_macro_f1": strict.macro_f1,
        })

    lines = ["Fraction  Records  Strict Macro-F1", "--------  -------  ---------------"]
    for row in rows:
        lines.append(
            f"{row['fraction'] * 100:>7.0f}%  {row['records']:>7d}  "
            f"{row['strict_macro_f1'] * 100:>15.2f}"
        )
    text = "\n".join(lines) + "\n"
    report_path = _out_path(args, file_cfg, "scaling.json")
    _write_json(report_path, {"rows": rows})
    sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_path = _require_file(args.model, "model checkpoint")
    model = train_mod.load_model(model_path)
    input_path = _require_file(args.input, "input text file")
    out = args.out or _out_path(args, file_cfg, "predictions.jsonl")

    spans_by_id: dict = {}
    with open(input_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            texts = tokenize(line.strip(), model.token_mode)
            if not texts:
                continue
            if len(texts) > model.encoder.config.maxlen:
                raise CliError(
                    "data_error",
                    f"line {line_no} has {len(texts)} tokens, exceeding maxlen "
                    f"{model.encoder.config.maxlen}",
                )
            sent = Sentence.from_texts(f"line{line_no:05d}", texts)
            spans_by_id[sent.id] = train_mod.predict(model, sent)
    ev.save_predictions(out, spans_by_id)
    print(json.dumps({"predictions": out, "sentences": len(spans_by_id)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------- wiring


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="global seed (default 0)")
    p.add_argument("--mock", action="store_true",
                   help="force the deterministic built-in endpoint")
    p.add_argument("--out-dir", help="directory for primary artifacts (default .)")
    p.add_argument("--token-mode", choices=("char", "latin"),
                   help="dataset tokenizer (default char)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--radius", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--maxlen", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aecner", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-cote", help="generate an elucidation corpus")
    _add_shared(p)
    p.add_argument("--dataset")
    p.add_argument("--strategy", choices=("explain", "think", "role"))
    p.add_argument("--endpoint", help="chat-completions base URL")
    p.add_argument("--model")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--max-parallel", type=int)
    p.add_argument("--retries", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_generate_cote)

    p = sub.add_parser("pretrain", help="incremental MLM pre-training")
    _add_shared(p)
    _add_train_flags(p)
    p.add_argument("--corpus")
    p.add_argument("--dataset")
    p.add_argument("--corpus-fraction", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--resume", help="continue from an encoder checkpoint")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="NER fine-tuning with a CRF layer")
    _add_shared(p)
    _add_train_flags(p)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", help="pretrained encoder checkpoint")
    p.add_argument("--no-pretrain", action="store_true",
                   help="start from a fresh encoder (baseline arm)")
    p.add_argument("--encoder-lr", type=float)
    p.add_argument("--crf-lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--constrained", action="store_true",
                   help="BIO-constrained Viterbi decoding")
    p.add_argument("--name", help="row label in the report")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a predictions file against gold")
    _add_shared(p)
    p.add_argument("--dataset")
    p.add_argument("--predictions")
    p.add_argument("--name")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare prompt-strategy variants")
    _add_shared(p)
    _add_train_flags(p)
    p.add_argument("--dataset")
    p.add_argument("--corpus-explain")
    p.add_argument("--corpus-think")
    p.add_argument("--corpus-role")
    p.add_argument("--lr", type=float)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--encoder-lr", type=float)
    p.add_argument("--crf-lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--constrained", action="store_true")
    p.set_defaults(fn=cmd_ablate, corpus_fraction=None, resume=None)

    p = sub.add_parser("scale", help="corpus-subset scaling harness")
    _add_shared(p)
    _add_train_flags(p)
    p.add_argument("--dataset")
    p.add_argument("--corpus")
    p.add_argument("--fractions", help="comma-separated, default 0.25,0.5,0.75,1.0")
    p.add_argument("--lr", type=float)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--encoder-lr", type=float)
    p.add_argument("--crf-lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--constrained", action="store_true")
    p.set_defaults(fn=cmd_scale, corpus_fraction=None, resume=None)

    p = sub.add_parser("predict", help="tag raw text with a trained model")
    _add_shared(p)
    p.add_argument("--model", help="model checkpoint path")
    p.add_argument("--input", help="text file, one sentence per line")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_predict)

    return parser


_ERROR_CODES = (
    (CliError, None),
    (CheckpointError, "checkpoint_error"),
    (cote_mod.TransientEndpointError, "endpoint_error"),
    (cote_mod.ContentError, "endpoint_error"),
    (CoteError, "cote_error"),
    (DataError, "data_error"),
    (FileNotFoundError, "io_error"),
    (ValueError, "invalid_input"),
)


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        for etype, code in _ERROR_CODES:
            if isinstance(exc, etype):
                code = exc.code if isinstance(exc, CliError) else code
                message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                print(f"{code}: {message}", file=sys.stderr)
                return 2 if code == "usage_error" else 1
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"internal_error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
