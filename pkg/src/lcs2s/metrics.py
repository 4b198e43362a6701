"""Corpus-level BLEU-4 and ROUGE-1/2/L F1, plus length-bucketed reporting.

BLEU-4 sums clipped n-gram matches and totals over the whole corpus for
n = 1..4, takes the geometric mean of the four precisions and applies the
brevity penalty exp(1 - r/c) when the candidate corpus is shorter than the
reference corpus. No smoothing: a zero corpus-level precision yields 0.
ROUGE variants are per-pair F1 scores averaged over the corpus. All
functions are pure and aggregate in a fixed order.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import ContractError

TokenSeqs = list[list[str]]


def _check_aligned(candidates: TokenSeqs, references: TokenSeqs, op: str) -> None:
    if len(candidates) != len(references):
        raise ContractError(
            f"{op}: {len(candidates)} candidates vs {len(references)} references"
        )
    if not references:
        raise ContractError(f"{op}: empty reference list")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: TokenSeqs, references: TokenSeqs) -> float:
    """Corpus-level BLEU-4 over aligned candidate/reference pairs."""
    _check_aligned(candidates, references, "bleu4")
    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            matches[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in cand_counts.items()
            )
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_precision)


def _f1(overlap: float, cand_total: float, ref_total: float) -> float:
    precision = overlap / cand_total if cand_total > 0 else 0.0
    recall = overlap / ref_total if ref_total > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def rouge_n(n: int, candidates: TokenSeqs, references: TokenSeqs) -> float:
    """Mean per-pair ROUGE-N F1 with clipped n-gram overlap."""
    if n not in (1, 2):
        raise ContractError(f"rouge_n: unsupported order {n}")
    _check_aligned(candidates, references, "rouge_n")
    scores = []
    for cand, ref in zip(candidates, references):
        cand_counts = _ngrams(cand, n)
        ref_counts = _ngrams(ref, n)
        overlap = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        scores.append(_f1(overlap, sum(cand_counts.values()), sum(ref_counts.values())))
    return sum(scores) / len(scores)


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(cur[j - 1], prev[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidates: TokenSeqs, references: TokenSeqs) -> float:
    """Mean per-pair LCS-based F1."""
    _check_aligned(candidates, references, "rouge_l")
    scores = []
    for cand, ref in zip(candidates, references):
        lcs = _lcs_len(cand, ref)
        scores.append(_f1(lcs, len(cand), len(ref)))
    return sum(scores) / len(scores)


@dataclass
class BucketScore:
    lo: int
    hi: int
    count: int
    bleu4: float
    rouge2_f1: float


def length_bucketed_eval(
    candidates: TokenSeqs, references: TokenSeqs, bucket_width: int = 10
) -> list[BucketScore]:
    """BLEU-4 and ROUGE-2 F1 within buckets of reference length."""
    if bucket_width < 1:
        raise ContractError("length_bucketed_eval: bucket_width must be >= 1")
    _check_aligned(candidates, references, "length_bucketed_eval")
    buckets: dict[int, tuple[TokenSeqs, TokenSeqs]] = {}
    for cand, ref in zip(candidates, references):
        cands, refs = buckets.setdefault(len(ref) // bucket_width, ([], []))
        cands.append(cand)
        refs.append(ref)
    rows = []
    for idx in sorted(buckets):
        cands, refs = buckets[idx]
        rows.append(
            BucketScore(
                lo=idx * bucket_width,
                hi=(idx + 1) * bucket_width,
                count=len(refs),
                bleu4=bleu4(cands, refs),
                rouge2_f1=rouge_n(2, cands, refs),
            )
        )
    return rows


@dataclass
class EvalReport:
    bleu4: float
    rouge1_f1: float
    rouge2_f1: float
    rougeL_f1: float
    buckets: list[BucketScore] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "bleu4": self.bleu4,
            "rouge1_f1": self.rouge1_f1,
            "rouge2_f1": self.rouge2_f1,
            "rougeL_f1": self.rougeL_f1,
            "buckets": [
                {
                    "lo": b.lo,
                    "hi": b.hi,
                    "count": b.count,
                    "bleu4": b.bleu4,
                    "rouge2_f1": b.rouge2_f1,
                }
                for b in self.buckets
            ],
        }

    def as_text(self) -> str:
        lines = [
            f"bleu4={self.bleu4:.6f}",
            f"rouge1_f1={self.rouge1_f1:.6f}",
            f"rouge2_f1={self.rouge2_f1:.6f}",
            f"rougeL_f1={self.rougeL_f1:.6f}",
        ]
        for b in self.buckets:
            lines.append(
                f"bucket[{b.lo},{b.hi}) count={b.count} "
                f"bleu4={b.bleu4:.6f} rouge2_f1={b.rouge2_f1:.6f}"
            )
        return "\n".join(lines)


def evaluate_pairs(
    candidates: TokenSeqs, references: TokenSeqs, bucket_width: int = 10
) -> EvalReport:
    """Full report over aligned pairs: corpus metrics plus length buckets."""
    return EvalReport(
        bleu4=bleu4(candidates, references),
        rouge1_f1=rouge_n(1, candidates, references),
        rouge2_f1=rouge_n(2, candidates, references),
        rougeL_f1=rouge_l(candidates, references),
        buckets=length_bucketed_eval(candidates, references, bucket_width),
    )
