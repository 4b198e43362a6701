"""Corpus handling: vocabularies, JSONL IO, synthetic data, retrieval baselines.

Corpus files are JSON Lines, one object per line with fields ``fact`` (token
array), ``rationale`` (token array) and ``charge`` (label string). Prediction
files add a ``generated`` token array. Vocabulary files hold one token per
line, the line number being the id, with the four reserved tokens first.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, CorpusError, VocabError

PAD, UNK, SOS, STOP = "<pad>", "<unk>", "<sos>", "</s>"
RESERVED = (PAD, UNK, SOS, STOP)
PAD_ID, UNK_ID, SOS_ID, STOP_ID = 0, 1, 2, 3

MAX_SOURCE_LEN = 256
MAX_TARGET_LEN = 50
DEFAULT_SRC_VOCAB_SIZE = 100_000
DEFAULT_TGT_VOCAB_SIZE = 50_000
DEFAULT_MAX_CHARGES = 50
OTHERS = "others"


class Vocabulary:
    """Token<->id bijection with the four reserved ids pinned up front."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise VocabError(f"vocabulary must start with {RESERVED}")
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise VocabError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not (0 <= idx < len(self._tokens)):
            raise VocabError(f"id {idx} outside vocabulary of size {len(self._tokens)}")
        return self._tokens[idx]

    def encode(self, tokens: list[str]) -> list[int]:
        ids = self._ids
        return [ids.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.token_of(i) for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self._tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])


def build_vocab(records: list[dict], side: str, max_size: int) -> Vocabulary:
    """Frequency-ranked vocabulary over one side of a raw corpus.

    Reserved tokens take the first four ids; the remaining ``max_size - 4``
    slots go to the most frequent tokens, ties broken lexicographically.
    """
    if not records:
        raise ContractError("build_vocab: empty corpus")
    if side not in ("source", "target"):
        raise ContractError(f"build_vocab: unknown side {side!r}")
    key = "fact" if side == "source" else "rationale"
    counts = Counter()
    for rec in records:
        counts.update(rec[key])
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, _ in ranked[: max(0, max_size - len(RESERVED))]]
    return Vocabulary(list(RESERVED) + kept)


class ChargeVocab:
    """Charge label set with a trailing catch-all bucket."""

    def __init__(self, labels: list[str]):
        if not labels or labels[-1] != OTHERS:
            raise VocabError(f"charge labels must end with {OTHERS!r}")
        self._labels = list(labels)
        self._ids = {c: i for i, c in enumerate(self._labels)}
        if len(self._ids) != len(self._labels):
            raise VocabError("duplicate charge labels")

    def __len__(self) -> int:
        return len(self._labels)

    @property
    def labels(self) -> list[str]:
        return list(self._labels)

    @property
    def others_id(self) -> int:
        return len(self._labels) - 1

    def id_of(self, label: str) -> int:
        return self._ids.get(label, self.others_id)

    def label_of(self, idx: int) -> str:
        if not (0 <= idx < len(self._labels)):
            raise VocabError(f"charge id {idx} outside {len(self._labels)} labels")
        return self._labels[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for c in self._labels:
                fh.write(c + "\n")

    @classmethod
    def load(cls, path) -> "ChargeVocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])


def build_charge_vocab(records: list[dict], max_labels: int = DEFAULT_MAX_CHARGES) -> ChargeVocab:
    """Top charge labels by occurrence; everything else folds into the bucket."""
    if not records:
        raise ContractError("build_charge_vocab: empty corpus")
    counts = Counter(rec["charge"] for rec in records)
    counts.pop(OTHERS, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ChargeVocab([c for c, _ in ranked[:max_labels]] + [OTHERS])


@dataclass
class Example:
    """One encoded case: fact tokens, rationale tokens and a charge label.

    ``fact`` is stored after source truncation; ``tgt_ids`` always ends with
    the stop id and is capped at the target length limit.
    """

    fact: list[str]
    rationale: list[str]
    charge: str
    src_ids: list[int]
    tgt_ids: list[int]
    charge_id: int


def read_records(path) -> list[dict]:
    """Parse and schema-check a JSONL corpus file."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            for fld in ("fact", "rationale", "charge"):
                if fld not in obj:
                    raise CorpusError(f"{path}:{lineno}: missing field {fld!r}")
            for fld in ("fact", "rationale"):
                val = obj[fld]
                if not isinstance(val, list) or not all(isinstance(t, str) for t in val):
                    raise CorpusError(f"{path}:{lineno}: field {fld!r} must be a string array")
            if not isinstance(obj["charge"], str):
                raise CorpusError(f"{path}:{lineno}: field 'charge' must be a string")
            records.append(obj)
    return records


def load_jsonl(
    path,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    charges: ChargeVocab,
    max_source_len: int = MAX_SOURCE_LEN,
    max_target_len: int = MAX_TARGET_LEN,
) -> list[Example]:
    """Load and encode a corpus file.

    Facts are truncated to ``max_source_len`` tokens; rationale encodings are
    truncated to ``max_target_len - 1`` tokens and terminated with the stop
    id. Out-of-vocabulary tokens encode to the unk id and unknown charge
    strings map to the catch-all label.
    """
    examples = []
    for rec in read_records(path):
        fact = rec["fact"][:max_source_len]
        rationale = rec["rationale"]
        tgt_ids = tgt_vocab.encode(rationale[: max_target_len - 1]) + [STOP_ID]
        examples.append(
            Example(
                fact=fact,
                rationale=list(rationale),
                charge=rec["charge"],
                src_ids=src_vocab.encode(fact),
                tgt_ids=tgt_ids,
                charge_id=charges.id_of(rec["charge"]),
            )
        )
    return examples


def write_jsonl(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in rows:
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# --- synthetic confusable-charge corpus -----------------------------------

DISC_SLOT = "<disc>"
COUNT_SLOT = "<count_term>"
EVENTS_SLOT = "<events>"
COUNT_TOKEN = "repeatedly"

_NAMES = (
    "li_wei", "wang_fang", "zhang_wei", "liu_yang", "chen_jing",
    "yang_li", "zhao_lei", "huang_hua", "zhou_tao", "wu_gang",
    "xu_ming", "sun_li", "ma_chao", "zhu_qiang", "hu_bin",
    "guo_jun", "lin_feng", "he_ping", "gao_yan", "luo_cheng",
)
_NUMS = (
    "one", "two", "three", "five", "eight", "ten", "twenty", "thirty",
    "fifty", "eighty", "hundred", "two_hundred", "five_hundred",
    "thousand", "two_thousand",
)
_DATES = (
    "jan_3", "feb_14", "mar_9", "apr_21", "may_5", "jun_30",
    "jul_11", "aug_2", "sep_18", "oct_27", "nov_8", "dec_24",
)


@dataclass(frozen=True)
class ChargeDef:
    name: str
    discriminator: str


@dataclass(frozen=True)
class PairDef:
    """Two charges sharing one fact template.

    The fact is identical in distribution across the two charges: only the
    charge field and the discriminator token in the rationale differ. When
    ``event_tokens`` is set, the fact's ``<events>`` marker expands to one to
    three copies of the block and the rationale's ``<count_term>`` renders as
    the count token exactly when the block repeats, so that rationale token
    depends on counting repeated source events rather than on any single
    source token.
    """

    charges: tuple[ChargeDef, ChargeDef]
    fact_template: tuple[str, ...]
    rationale_template: tuple[str, ...]
    event_tokens: tuple[str, ...] | None = None


@dataclass(frozen=True)
class SynthSpec:
    pairs: tuple[PairDef, ...]
    slots: dict[str, tuple[str, ...]] = field(hash=False)
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    seed: int = 13

    def discriminator_of(self, charge_name: str) -> str:
        for pair in self.pairs:
            for ch in pair.charges:
                if ch.name == charge_name:
                    return ch.discriminator
        raise VocabError(f"unknown synthetic charge {charge_name!r}")


def default_synth_spec(
    train_size: int = 2000,
    dev_size: int = 200,
    test_size: int = 200,
    seed: int = 13,
    latent_count: bool = True,
) -> SynthSpec:
    """Three confusable charge pairs over shared fact templates."""
    homicide = PairDef(
        charges=(
            ChargeDef("intentional_homicide", "deliberately"),
            ChargeDef("negligent_homicide", "carelessly"),
        ),
        fact_template=(
            "on", "<date>", "defendant", "<name>", "struck", "the", "victim",
            "during", "a", "quarrel", "and", "the", "victim", "died",
        ),
        rationale_template=(
            "defendant", "<name>", "acted", "<disc>", "and", "caused", "the",
            "death", "of", "the", "victim", "on", "<date>",
        ),
    )
    if latent_count:
        property_fact = ("on", "<date>", "<name>", "entered", "the", "store",
                         "<events>", "worth", "<num>", "yuan")
        property_rationale = ("the", "court", "holds", "that", "<name>", "obtained",
                              "property", "worth", "<num>", "yuan", "<disc>",
                              "<count_term>", "and", "violated", "the", "law")
        events = ("and", "took", "goods")
    else:
        property_fact = ("on", "<date>", "<name>", "entered", "the", "store",
                         "and", "took", "goods", "worth", "<num>", "yuan")
        property_rationale = ("the", "court", "holds", "that", "<name>", "obtained",
                              "property", "worth", "<num>", "yuan", "<disc>",
                              "and", "violated", "the", "law")
        events = None
    prop = PairDef(
        charges=(ChargeDef("theft", "secretly"), ChargeDef("fraud", "by_deception")),
        fact_template=property_fact,
        rationale_template=property_rationale,
        event_tokens=events,
    )
    injury = PairDef(
        charges=(
            ChargeDef("intentional_injury", "with_intent"),
            ChargeDef("affray", "in_disorder"),
        ),
        fact_template=(
            "on", "<date>", "defendant", "<name>", "fought", "with", "others",
            "near", "the", "market", "injuring", "<num>", "people",
        ),
        rationale_template=(
            "<name>", "harmed", "<num>", "people", "<disc>", "near", "the", "market",
        ),
    )
    return SynthSpec(
        pairs=(homicide, prop, injury),
        slots={"<name>": _NAMES, "<num>": _NUMS, "<date>": _DATES},
        train_size=train_size,
        dev_size=dev_size,
        test_size=test_size,
        seed=seed,
    )


def _validate_spec(spec: SynthSpec) -> None:
    markers = {DISC_SLOT, COUNT_SLOT, EVENTS_SLOT}
    for pair in spec.pairs:
        for tok in pair.fact_template:
            if tok.startswith("<") and tok.endswith(">"):
                if tok == EVENTS_SLOT:
                    if pair.event_tokens is None:
                        raise ContractError(
                            f"synth spec: {EVENTS_SLOT} used without event tokens"
                        )
                elif tok not in spec.slots:
                    raise ContractError(f"synth spec: fact references undefined slot {tok!r}")
        if DISC_SLOT not in pair.rationale_template:
            raise ContractError("synth spec: rationale template lacks the discriminator slot")
        for tok in pair.rationale_template:
            if tok.startswith("<") and tok.endswith(">") and tok not in markers:
                if tok not in spec.slots:
                    raise ContractError(
                        f"synth spec: rationale references undefined slot {tok!r}"
                    )
        if COUNT_SLOT in pair.rationale_template and pair.event_tokens is None:
            raise ContractError(f"synth spec: {COUNT_SLOT} used without event tokens")


def _used_slots(spec: SynthSpec, pair: PairDef) -> list[str]:
    used = [s for s in spec.slots if s in pair.fact_template or s in pair.rationale_template]
    return sorted(used)


def render_record(pair: PairDef, charge_idx: int, slot_values: dict[str, str], k: int) -> dict:
    """Render one corpus record from a pair template and sampled slot values."""
    charge = pair.charges[charge_idx]
    fact = []
    for tok in pair.fact_template:
        if tok == EVENTS_SLOT:
            fact.extend(pair.event_tokens * k)
        else:
            fact.append(slot_values.get(tok, tok))
    rationale = []
    for tok in pair.rationale_template:
        if tok == DISC_SLOT:
            rationale.append(charge.discriminator)
        elif tok == COUNT_SLOT:
            if k >= 2:
                rationale.append(COUNT_TOKEN)
        else:
            rationale.append(slot_values.get(tok, tok))
    return {"fact": fact, "rationale": rationale, "charge": charge.name}


def synth_generate(spec: SynthSpec) -> dict[str, list[dict]]:
    """Generate disjoint train/dev/test splits of confusable-pair records.

    Each example draws a pair, a slot-value combination not used before (so
    no (template, slot-values) tuple crosses splits) and then a charge
    uniformly within the pair, which keeps the rendered facts identically
    distributed across the two charges. Fully deterministic for a fixed seed.
    """
    _validate_spec(spec)
    for name in ("train_size", "dev_size", "test_size"):
        if getattr(spec, name) < 1:
            raise ContractError(f"synth spec: {name} must be >= 1")
    rng = np.random.default_rng(spec.seed)
    used: set[tuple] = set()

    def draw() -> dict:
        while True:
            pi = int(rng.integers(len(spec.pairs)))
            pair = spec.pairs[pi]
            values = {
                slot: spec.slots[slot][int(rng.integers(len(spec.slots[slot])))]
                for slot in _used_slots(spec, pair)
            }
            k = int(rng.integers(1, 4)) if pair.event_tokens is not None else 1
            key = (pi, tuple(sorted(values.items())), k)
            if key in used:
                continue
            used.add(key)
            charge_idx = int(rng.integers(2))
            return render_record(pair, charge_idx, values, k)

    splits = {}
    for name, size in (("train", spec.train_size), ("dev", spec.dev_size), ("test", spec.test_size)):
        splits[name] = [draw() for _ in range(size)]
    return splits


# --- retrieval and random baselines ----------------------------------------


def _filtered_pool(pool: list[Example], charge_filter: int | None, op: str) -> list[Example]:
    if not pool:
        raise ContractError(f"{op}: empty pool")
    if charge_filter is None:
        return pool
    docs = [ex for ex in pool if ex.charge_id == charge_filter]
    if not docs:
        raise ContractError(f"{op}: no pool example with charge id {charge_filter}")
    return docs


def bm25_retrieve(
    query_fact: list[str],
    pool: list[Example],
    charge_filter: int | None = None,
    k1: float = 1.2,
    b: float = 0.75,
) -> list[str]:
    """Rationale of the pool fact scoring highest under BM25 for the query.

    idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1), summed over the query's
    tokens with tf saturation and document-length normalization over the
    (possibly charge-filtered) pool. Ties go to the lowest pool index.
    """
    docs = _filtered_pool(pool, charge_filter, "bm25_retrieve")
    n_docs = len(docs)
    tfs = [Counter(ex.fact) for ex in docs]
    lengths = [len(ex.fact) for ex in docs]
    avgdl = sum(lengths) / n_docs
    df = Counter()
    for tf in tfs:
        df.update(tf.keys())
    idf = {
        t: math.log((n_docs - d + 0.5) / (d + 0.5) + 1.0) for t, d in df.items()
    }
    best_idx = 0
    best_score = -math.inf
    for i, tf in enumerate(tfs):
        norm = k1 * (1.0 - b + b * lengths[i] / avgdl) if avgdl > 0 else k1
        score = 0.0
        for term in query_fact:
            f = tf.get(term)
            if f:
                score += idf[term] * f * (k1 + 1.0) / (f + norm)
        if score > best_score:
            best_score = score
            best_idx = i
    return list(docs[best_idx].rationale)


def rand_baseline(
    pool: list[Example],
    charge_filter: int | None = None,
    rng: np.random.Generator | int = 0,
) -> list[str]:
    """Uniform seeded choice of a rationale from the (filtered) pool."""
    docs = _filtered_pool(pool, charge_filter, "rand_baseline")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    return list(docs[int(rng.integers(len(docs)))].rationale)
