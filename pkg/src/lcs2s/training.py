"""Teacher-forced NLL training with Adam, lr decay and early stopping.

The loss is the per-token mean of negative log-likelihood over a batch (the
selection metric, perplexity, is unaffected by the sum/mean choice). Every
``check_interval_batches`` batches the validation perplexity is computed; an
improvement (strictly lower, ties do not count) persists a checkpoint, a
non-improvement multiplies the learning rate by ``lr_reduce_factor``, and
``patience`` consecutive non-improvements stop the run. The whole loop is
sequential and seeded, so identical runs produce bytewise-identical
checkpoints and logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import Example, STOP_ID
from .errors import CheckpointError, ContractError, NumericError
from .model import ModelParams, Seq2Seq, load_checkpoint, save_checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 64
    init_lr: float = 3e-4
    lr_reduce_factor: float = 0.5
    check_interval_batches: int = 1000
    patience: int = 8
    max_target_len: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 5.0
    seed: int = 0
    max_batches: int | None = None  # safety cap; None runs until early stopping

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if not (0.0 < self.lr_reduce_factor < 1.0):
            raise ContractError("lr_reduce_factor must lie in (0, 1)")


def clip_target(example: Example, max_target_len: int) -> Example:
    """Truncate an over-long target and re-terminate it with the stop id."""
    if len(example.tgt_ids) <= max_target_len:
        return example
    return Example(
        fact=example.fact,
        rationale=example.rationale,
        charge=example.charge,
        src_ids=example.src_ids,
        tgt_ids=example.tgt_ids[: max_target_len - 1] + [STOP_ID],
        charge_id=example.charge_id,
    )


def nll_loss(model: Seq2Seq, batch: list[Example]) -> Tensor:
    """Mean negative log-likelihood per target token over a batch."""
    if not batch:
        raise ContractError("nll_loss: empty batch")
    logps: list[Tensor] = []
    for ex in batch:
        logps.extend(model.forward_logprob(ex))
    return ad.scale(ad.add_n(logps), -1.0 / len(logps))


def perplexity(model: Seq2Seq, dataset: list[Example]) -> float:
    """exp(total NLL / token count) over a dataset, computed without a tape."""
    if not dataset:
        raise ContractError("perplexity: empty dataset")
    total = 0.0
    count = 0
    for ex in dataset:
        for lp in model.forward_logprob(ex):
            total += lp.item()
            count += 1
    return math.exp(-total / count)


class Adam:
    """Adam with bias correction, applied after global-norm gradient clipping."""

    def __init__(self, params: ModelParams, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, grad_clip_norm: float = 5.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip_norm = grad_clip_norm
        self.m = {name: np.zeros_like(p.data) for name, p in params.named()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.named()}
        self.t = 0

    def step(self, lr: float) -> None:
        named = self.params.named()
        sq = 0.0
        for name, p in named:
            if np.isnan(p.grad).any():
                raise NumericError(f"NaN gradient in parameter {name}")
            sq += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        clip = 1.0
        if self.grad_clip_norm > 0 and norm > self.grad_clip_norm:
            clip = self.grad_clip_norm / norm
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in named:
            g = p.grad * clip
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    best_ppl: float
    best_batch: int
    batches_run: int
    stop_reason: str
    log_lines: list[str]
    checkpoint_path: str


def train(
    model: Seq2Seq,
    train_set: list[Example],
    val_set: list[Example],
    cfg: TrainConfig,
    checkpoint_path,
    log_path=None,
) -> TrainResult:
    """Run the training loop; leaves the best parameters loaded in ``model``.

    The log records one line per validation check:
    ``batch=<n> loss=<f> val_ppl=<f> lr=<f> improved=<0|1>``.
    """
    if not train_set or not val_set:
        raise ContractError("train: training and validation sets must be nonempty")
    train_set = [clip_target(ex, cfg.max_target_len) for ex in train_set]

    rng = np.random.default_rng(cfg.seed)
    adam = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.grad_clip_norm)
    lr = cfg.init_lr
    best_ppl = math.inf
    best_batch = 0
    bad_checks = 0
    batch_idx = 0
    last_loss = math.nan
    stop_reason = "max_batches"
    log_lines: list[str] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None

    def log(line: str) -> None:
        log_lines.append(line)
        if log_fh is not None:
            log_fh.write(line + "\n")
            log_fh.flush()

    def run_check() -> bool:
        nonlocal best_ppl, best_batch, bad_checks, lr
        ppl = perplexity(model, val_set)
        improved = ppl < best_ppl
        if improved:
            best_ppl = ppl
            best_batch = batch_idx
            bad_checks = 0
            save_checkpoint(checkpoint_path, model.config, model.params)
        else:
            bad_checks += 1
            lr *= cfg.lr_reduce_factor
        log(
            f"batch={batch_idx} loss={last_loss:.6f} val_ppl={ppl:.6f} "
            f"lr={lr:g} improved={int(improved)}"
        )
        return improved

    try:
        stop = False
        while not stop:
            order = rng.permutation(len(train_set))
            for lo in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[lo : lo + cfg.batch_size]]
                batch_idx += 1
                with Tape() as tape:
                    loss = nll_loss(model, batch)
                    tape.backward(loss)
                last_loss = loss.item()
                adam.step(lr)
                model.params.zero_grad()
                if batch_idx % cfg.check_interval_batches == 0:
                    run_check()
                    if bad_checks >= cfg.patience:
                        stop_reason = "patience"
                        stop = True
                        break
                if cfg.max_batches is not None and batch_idx >= cfg.max_batches:
                    stop_reason = "max_batches"
                    stop = True
                    break
        if math.isinf(best_ppl):
            # No check ever ran inside the budget; take one now so a best
            # checkpoint always exists.
            run_check()
    finally:
        if log_fh is not None:
            log_fh.close()

    _, best_params = load_checkpoint(checkpoint_path)
    model.params = best_params
    return TrainResult(
        best_ppl=best_ppl,
        best_batch=best_batch,
        batches_run=batch_idx,
        stop_reason=stop_reason,
        log_lines=log_lines,
        checkpoint_path=str(checkpoint_path),
    )
