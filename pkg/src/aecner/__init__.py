"""aecner: sequence-labeling toolkit for elucidation-augmented NER.

The pipeline has three stages: generating an elucidation corpus from gold
entity instances via a chat-completions endpoint (or its deterministic
mock), incremental masked-language-model pre-training of a compact encoder
on that corpus, and CRF-based NER fine-tuning with Viterbi decoding. Model
quality is scored with strict- and partial-match entity-level Macro-F1.
"""

from importlib import resources

from .core import (
    Dataset,
    DataError,
    EntitySpan,
    LabelScheme,
    Sentence,
    TagSequence,
    Token,
    Vocab,
    bio_to_spans,
    build_vocab,
    parse_dataset,
    spans_to_bio,
    split_dataset,
    tokenize,
)
from .cote import (
    ChatEndpointConfig,
    CoteCorpus,
    CoteRecord,
    PromptStrategy,
    build_corpus,
    build_prompt,
    load_corpus,
    request_elucidation,
    save_corpus,
    subset_corpus,
)
from .crf import (
    CrfParams,
    constrained_viterbi,
    crf_nll,
    log_partition,
    posterior_marginals,
    sequence_score,
    viterbi,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    backward,
    emissions,
    encode,
    init_params,
    load_encoder,
    mlm_logits,
    save_encoder,
)
from .evaluation import (
    EvalReport,
    TypeScore,
    emit_report,
    macro_f1,
    partial_match,
    strict_match,
)
from .mlm import MaskedBatch, PretrainConfig, mask_tokens, mlm_loss, pretrain
from .train import (
    FinetuneConfig,
    NerModel,
    OptimizerState,
    adamw_step,
    finetune,
    init_adamw,
    linear_schedule,
    load_model,
    predict,
    predict_dataset,
    save_model,
)

__version__ = "0.1.0"


def toy_dataset_path() -> str:
    """Filesystem path of the bundled toy dataset."""
    return str(resources.files("aecner").joinpath("data/toy.conll"))
