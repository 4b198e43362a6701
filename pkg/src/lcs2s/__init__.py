"""Label-conditioned sequence-to-sequence toolkit.

A self-contained encoder-decoder stack for generating charge-conditioned
rationales from case fact descriptions: tape-based reverse-mode autodiff,
a bidirectional LSTM encoder with global attention, a decoder with two
switchable label-injection points, Adam training with perplexity-based
checkpoint selection, beam-search inference, BLEU/ROUGE evaluation, and
retrieval/random baselines over a synthetic confusable-charge corpus.
"""

from .autodiff import Tape, Tensor, default_dtype, grad_check, set_default_dtype
from .corpus import (
    ChargeVocab,
    Example,
    SynthSpec,
    Vocabulary,
    bm25_retrieve,
    build_charge_vocab,
    build_vocab,
    default_synth_spec,
    load_jsonl,
    rand_baseline,
    synth_generate,
)
from .decoding import Hypothesis, beam_search, export_attention, greedy_decode
from .metrics import EvalReport, bleu4, evaluate_pairs, length_bucketed_eval, rouge_l, rouge_n
from .model import (
    EncoderOutput,
    ModelConfig,
    ModelParams,
    Seq2Seq,
    load_checkpoint,
    lstm_cell_step,
    save_checkpoint,
)
from .training import Adam, TrainConfig, TrainResult, nll_loss, perplexity, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ChargeVocab",
    "EncoderOutput",
    "EvalReport",
    "Example",
    "Hypothesis",
    "ModelConfig",
    "ModelParams",
    "Seq2Seq",
    "SynthSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "Vocabulary",
    "beam_search",
    "bleu4",
    "bm25_retrieve",
    "build_charge_vocab",
    "build_vocab",
    "default_dtype",
    "default_synth_spec",
    "evaluate_pairs",
    "export_attention",
    "grad_check",
    "greedy_decode",
    "length_bucketed_eval",
    "load_checkpoint",
    "load_jsonl",
    "lstm_cell_step",
    "nll_loss",
    "perplexity",
    "rand_baseline",
    "rouge_l",
    "rouge_n",
    "save_checkpoint",
    "set_default_dtype",
    "synth_generate",
    "train",
]
