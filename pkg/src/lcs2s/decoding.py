"""Beam-search and greedy inference with stop-token termination.

Hypotheses are ranked by summed log-probability with no length
normalization. A hypothesis is finished exactly when it emits the stop
token; hypotheses still active at the length limit are force-terminated by
appending the stop token together with its actual log-probability, so
rankings stay probability-consistent. Decoding runs without a tape and is a
pure function of the parameters and the input, safe to run concurrently over
a shared read-only model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import SOS_ID, STOP_ID
from .errors import ContractError
from .model import EncoderOutput, Seq2Seq


@dataclass
class Hypothesis:
    """A decoded path: emitted ids, score, decoder state, attention history."""

    tokens: list[int]
    logprob: float
    state: tuple
    attn: list
    finished: bool = False


def _log_dist(model: Seq2Seq, prev: int, state, charge_id: int, enc: EncoderOutput):
    dist, new_state, alpha = model.decoder_step(prev, state, charge_id, enc)
    logp = np.log(dist.data.astype(np.float64))
    a = None if alpha is None else alpha.data.copy()
    return logp, new_state, a


def greedy_decode(
    model: Seq2Seq,
    src_ids: list[int],
    charge_id: int,
    max_len: int = 50,
) -> Hypothesis:
    """Argmax decoding, ties to the lowest token id; reference path for beam=1."""
    if max_len < 1:
        raise ContractError("greedy_decode: max_len must be >= 1")
    enc = model.encode(src_ids)
    state = (enc.init_h, enc.init_c)
    prev = SOS_ID
    tokens: list[int] = []
    attn: list = []
    logprob = 0.0
    for _ in range(max_len):
        logp, state, a = _log_dist(model, prev, state, charge_id, enc)
        tok = int(np.argmax(logp))
        tokens.append(tok)
        attn.append(a)
        logprob += float(logp[tok])
        if tok == STOP_ID:
            return Hypothesis(tokens, logprob, state, attn, finished=True)
        prev = tok
    # Length limit hit: force-terminate, charging the stop token's log-prob.
    logp, state, a = _log_dist(model, prev, state, charge_id, enc)
    tokens.append(STOP_ID)
    attn.append(a)
    logprob += float(logp[STOP_ID])
    return Hypothesis(tokens, logprob, state, attn, finished=True)


def beam_search(
    model: Seq2Seq,
    src_ids: list[int],
    charge_id: int,
    beam_size: int = 5,
    max_len: int = 50,
) -> Hypothesis:
    """Best finished hypothesis under breadth-limited search.

    Each step expands every active hypothesis over the full vocabulary and
    keeps the ``beam_size`` best extensions; extensions emitting the stop
    token are set aside as finished (up to ``beam_size`` retained). The
    search ends when ``beam_size`` hypotheses have finished or all active
    ones reach ``max_len``, and the highest-scoring finalized hypothesis
    wins. With ``beam_size=1`` this reduces exactly to greedy decoding.
    """
    if beam_size < 1:
        raise ContractError("beam_search: beam_size must be >= 1")
    if max_len < 1:
        raise ContractError("beam_search: max_len must be >= 1")
    enc = model.encode(src_ids)
    active = [Hypothesis([], 0.0, (enc.init_h, enc.init_c), [], finished=False)]
    finished: list[Hypothesis] = []

    for _ in range(max_len):
        if not active or len(finished) >= beam_size:
            break
        candidates = []
        for hyp in active:
            prev = hyp.tokens[-1] if hyp.tokens else SOS_ID
            logp, new_state, a = _log_dist(model, prev, hyp.state, charge_id, enc)
            for tok in range(logp.shape[0]):
                candidates.append((hyp.logprob + float(logp[tok]), hyp, tok, new_state, a))
        # Stable sort: ties resolve to earlier hypothesis, then lower token id.
        candidates.sort(key=lambda cand: -cand[0])
        active = []
        for score, hyp, tok, new_state, a in candidates[:beam_size]:
            ext = Hypothesis(
                hyp.tokens + [tok], score, new_state, hyp.attn + [a],
                finished=(tok == STOP_ID),
            )
            (finished if ext.finished else active).append(ext)
        if len(finished) > beam_size:
            finished.sort(key=lambda h: -h.logprob)
            del finished[beam_size:]

    for hyp in active:
        prev = hyp.tokens[-1] if hyp.tokens else SOS_ID
        logp, state, a = _log_dist(model, prev, hyp.state, charge_id, enc)
        finished.append(
            Hypothesis(
                hyp.tokens + [STOP_ID],
                hyp.logprob + float(logp[STOP_ID]),
                state,
                hyp.attn + [a],
                finished=True,
            )
        )
    return max(finished, key=lambda h: h.logprob)


def export_attention(hypothesis: Hypothesis, src_tokens: list[str], tgt_tokens: list[str], path) -> None:
    """Write a hypothesis' attention history as comma-separated text.

    Rows are target steps (including the stop token), columns are source
    positions; every row is a softmax output and sums to one.
    """
    if not hypothesis.attn or any(a is None for a in hypothesis.attn):
        raise ContractError("export_attention: hypothesis carries no attention history")
    matrix = np.stack(hypothesis.attn)
    if matrix.shape != (len(tgt_tokens), len(src_tokens)):
        raise ContractError(
            f"export_attention: matrix shape {matrix.shape} does not match "
            f"{len(tgt_tokens)} target and {len(src_tokens)} source tokens"
        )
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("," + ",".join(src_tokens) + "\n")
            for token, weights in zip(tgt_tokens, matrix):
                fh.write(token + "," + ",".join(repr(float(w)) for w in weights) + "\n")
    except OSError as exc:
        raise ContractError(f"export_attention: cannot write {path}: {exc}") from exc
