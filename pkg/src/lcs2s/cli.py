"""Command-line entry point tying corpus prep, training, decoding and eval.

Every subcommand writes its fully-resolved configuration as JSON next to its
outputs, so any artifact can be reproduced from its directory alone. Exit
codes: 0 on success, 1 on usage errors, 2 on data or model errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import corpus as cp
from . import decoding, metrics, model, training
from .errors import (
    CheckpointError,
    ContractError,
    CorpusError,
    NumericError,
    ShapeError,
    VocabError,
)

_DATA_ERRORS = (
    CheckpointError,
    ContractError,
    CorpusError,
    NumericError,
    ShapeError,
    VocabError,
    OSError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_run_config(path, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_vocabs(args):
    src_vocab = cp.Vocabulary.load(args.src_vocab)
    tgt_vocab = cp.Vocabulary.load(args.tgt_vocab)
    charges = cp.ChargeVocab.load(args.charges)
    return src_vocab, tgt_vocab, charges


def _strip_specials(tokens: list[str]) -> list[str]:
    return [t for t in tokens if t not in (cp.STOP, cp.PAD)]


def _latent_report(rows: list[dict], token: str) -> dict:
    with_token = [r for r in rows if token in r["rationale"]]
    hits = sum(1 for r in with_token if token in r["generated"])
    return {
        "token": token,
        "reference_count": len(with_token),
        "accuracy": hits / len(with_token) if with_token else None,
    }


def _eval_rows(rows: list[dict], bucket_width: int, latent_token: str | None):
    candidates = [_strip_specials(r["generated"]) for r in rows]
    references = [_strip_specials(r["rationale"]) for r in rows]
    report = metrics.evaluate_pairs(candidates, references, bucket_width)
    payload = report.as_dict()
    text = report.as_text()
    if latent_token:
        latent = _latent_report(rows, latent_token)
        payload["latent_token"] = latent
        acc = "n/a" if latent["accuracy"] is None else f"{latent['accuracy']:.6f}"
        text += (
            f"\nlatent_token={latent['token']} "
            f"references={latent['reference_count']} accuracy={acc}"
        )
    return payload, text


def cmd_gen_data(args) -> int:
    spec = cp.default_synth_spec(
        train_size=args.train_size,
        dev_size=args.dev_size,
        test_size=args.test_size,
        seed=args.seed,
        latent_count=args.latent_count,
    )
    splits = cp.synth_generate(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    for name, rows in splits.items():
        cp.write_jsonl(os.path.join(args.out_dir, f"{name}.jsonl"), rows)
    _write_run_config(os.path.join(args.out_dir, "gen_data.config.json"), args)
    print(f"wrote {', '.join(sorted(splits))} to {args.out_dir}")
    return 0


def cmd_build_vocab(args) -> int:
    records = cp.read_records(args.train)
    src_vocab = cp.build_vocab(records, "source", args.src_max_size)
    tgt_vocab = cp.build_vocab(records, "target", args.tgt_max_size)
    charges = cp.build_charge_vocab(records, args.max_charges)
    os.makedirs(args.out_dir, exist_ok=True)
    src_vocab.save(os.path.join(args.out_dir, "src_vocab.txt"))
    tgt_vocab.save(os.path.join(args.out_dir, "tgt_vocab.txt"))
    charges.save(os.path.join(args.out_dir, "charges.txt"))
    _write_run_config(os.path.join(args.out_dir, "build_vocab.config.json"), args)
    print(
        f"source vocab {len(src_vocab)}, target vocab {len(tgt_vocab)}, "
        f"{len(charges)} charge labels"
    )
    return 0


def cmd_train(args) -> int:
    src_vocab, tgt_vocab, charges = _load_vocabs(args)
    train_set = cp.load_jsonl(args.train, src_vocab, tgt_vocab, charges,
                              max_target_len=args.max_target_len)
    dev_set = cp.load_jsonl(args.dev, src_vocab, tgt_vocab, charges,
                            max_target_len=args.max_target_len)
    model_cfg = model.ModelConfig(
        src_vocab_size=len(src_vocab),
        tgt_vocab_size=len(tgt_vocab),
        num_charges=len(charges),
        embed_dim=args.embed_dim,
        label_embed_dim=args.label_embed_dim,
        hidden_dim=args.hidden_dim,
        label_mode=args.label_mode,
        attention_enabled=not args.no_attention,
    )
    train_cfg = training.TrainConfig(
        batch_size=args.batch_size,
        init_lr=args.lr,
        lr_reduce_factor=args.lr_reduce_factor,
        check_interval_batches=args.check_interval,
        patience=args.patience,
        max_target_len=args.max_target_len,
        grad_clip_norm=args.grad_clip,
        seed=args.seed,
        max_batches=args.max_batches,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    net = model.Seq2Seq.init(model_cfg, seed=args.seed)
    result = training.train(
        net,
        train_set,
        dev_set,
        train_cfg,
        checkpoint_path=os.path.join(args.out_dir, "model.ckpt"),
        log_path=os.path.join(args.out_dir, "train.log"),
    )
    _write_run_config(os.path.join(args.out_dir, "train.config.json"), args)
    print(
        f"best val_ppl={result.best_ppl:.6f} at batch {result.best_batch} "
        f"({result.batches_run} batches, stop: {result.stop_reason})"
    )
    return 0


def cmd_generate(args) -> int:
    src_vocab, tgt_vocab, charges = _load_vocabs(args)
    examples = cp.load_jsonl(args.input, src_vocab, tgt_vocab, charges)
    cfg, params = model.load_checkpoint(args.checkpoint)
    net = model.Seq2Seq(cfg, params)
    override_id = None
    if args.charge_override is not None:
        if args.charge_override not in charges.labels:
            raise VocabError(f"--charge-override: unknown charge {args.charge_override!r}")
        override_id = charges.id_of(args.charge_override)
    if args.dump_attention and not cfg.attention_enabled:
        raise ContractError("--dump-attention requires an attention-enabled checkpoint")
    if args.dump_attention:
        os.makedirs(args.dump_attention, exist_ok=True)

    rows = []
    for idx, ex in enumerate(examples):
        charge_id = ex.charge_id if override_id is None else override_id
        if args.greedy or args.beam == 1:
            hyp = decoding.greedy_decode(net, ex.src_ids, charge_id, max_len=args.max_len)
        else:
            hyp = decoding.beam_search(net, ex.src_ids, charge_id,
                                       beam_size=args.beam, max_len=args.max_len)
        generated = tgt_vocab.decode(hyp.tokens)
        if args.dump_attention:
            decoding.export_attention(
                hyp, ex.fact, generated,
                os.path.join(args.dump_attention, f"attn_{idx:05d}.csv"),
            )
        row = {
            "fact": ex.fact,
            "rationale": ex.rationale,
            "charge": ex.charge,
            "generated": _strip_specials(generated),
        }
        if args.charge_override is not None:
            row["charge_override"] = args.charge_override
        rows.append(row)
    cp.write_jsonl(args.out, rows)
    _write_run_config(os.path.splitext(args.out)[0] + ".config.json", args)
    print(f"decoded {len(rows)} examples to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    rows = cp.read_records(args.predictions)
    for i, row in enumerate(rows, start=1):
        if "generated" not in row:
            raise CorpusError(f"{args.predictions}:{i}: missing field 'generated'")
    payload, text = _eval_rows(rows, args.bucket_width, args.latent_token)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_run_config(os.path.splitext(args.out)[0] + ".config.json", args)
    return 0


def cmd_baseline(args) -> int:
    src_vocab, tgt_vocab, charges = _load_vocabs(args)
    pool = cp.load_jsonl(args.pool, src_vocab, tgt_vocab, charges)
    queries = cp.load_jsonl(args.input, src_vocab, tgt_vocab, charges)
    rng = np.random.default_rng(args.seed)
    rows = []
    for ex in queries:
        charge_filter = ex.charge_id if args.method.endswith("+charge") else None
        if args.method.startswith("bm25"):
            generated = cp.bm25_retrieve(ex.fact, pool, charge_filter)
        else:
            generated = cp.rand_baseline(pool, charge_filter, rng)
        rows.append(
            {
                "fact": ex.fact,
                "rationale": ex.rationale,
                "charge": ex.charge,
                "generated": generated,
            }
        )
    cp.write_jsonl(args.out, rows)
    _write_run_config(os.path.splitext(args.out)[0] + ".config.json", args)
    payload, text = _eval_rows(rows, args.bucket_width, None)
    print(f"method={args.method}")
    print(text)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="lcs2s", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic confusable-charge corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--dev-size", type=int, default=200)
    p.add_argument("--test-size", type=int, default=200)
    p.add_argument("--seed", type=int, default=13)
    p.add_argument("--latent-count", action=argparse.BooleanOptionalAction, default=True,
                   help="include the count-dependent rationale token")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-vocab", help="build source/target vocabularies and charge labels")
    p.add_argument("--train", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--src-max-size", type=int, default=cp.DEFAULT_SRC_VOCAB_SIZE)
    p.add_argument("--tgt-max-size", type=int, default=cp.DEFAULT_TGT_VOCAB_SIZE)
    p.add_argument("--max-charges", type=int, default=cp.DEFAULT_MAX_CHARGES)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--src-vocab", required=True)
    p.add_argument("--tgt-vocab", required=True)
    p.add_argument("--charges", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--label-embed-dim", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=128)
    p.add_argument("--label-mode", choices=model.LABEL_MODES, default="full")
    p.add_argument("--no-attention", action="store_true",
                   help="plain encoder-decoder without attention")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--lr-reduce-factor", type=float, default=0.5)
    p.add_argument("--check-interval", type=int, default=1000)
    p.add_argument("--patience", type=int, default=8)
    p.add_argument("--max-target-len", type=int, default=cp.MAX_TARGET_LEN)
    p.add_argument("--grad-clip", type=float, default=5.0)
    p.add_argument("--max-batches", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a corpus file with a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src-vocab", required=True)
    p.add_argument("--tgt-vocab", required=True)
    p.add_argument("--charges", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--greedy", action="store_true", help="force greedy decoding")
    p.add_argument("--max-len", type=int, default=cp.MAX_TARGET_LEN)
    p.add_argument("--charge-override", default=None,
                   help="decode every example under this charge label instead of its own")
    p.add_argument("--dump-attention", default=None, metavar="DIR",
                   help="write one attention matrix CSV per example")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a predictions file against its references")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", default=None, help="write the report as JSON")
    p.add_argument("--bucket-width", type=int, default=10)
    p.add_argument("--latent-token", default=None,
                   help="also report accuracy on this count-dependent token")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="run a retrieval or random baseline and score it")
    p.add_argument("--method", required=True,
                   choices=("rand", "rand+charge", "bm25", "bm25+charge"))
    p.add_argument("--pool", required=True, help="corpus file to retrieve from")
    p.add_argument("--input", required=True, help="corpus file to answer")
    p.add_argument("--out", required=True)
    p.add_argument("--bucket-width", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_baseline)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
