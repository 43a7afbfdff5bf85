"""Command-line surface: one subcommand per pipeline stage plus `pipeline`.

Exit codes: 0 on success, 1 when inputs or flags fail validation, 2 when
execution fails after validation. All randomness is taken from explicit
--seed flags, so any subcommand rerun with the same inputs writes the
same bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .alignment import align_expert, save_permutations
from .analysis import expert_cka_study, expert_usage, perplexity, reports_to_csv, reports_to_json, routing_trace_for
from .checkpoint_io import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import (
    DOMAINS,
    VOCAB_SIZE,
    gen_corpus,
    read_calibration,
    read_corpus,
    sample_calibration,
    shared_vocab,
    write_calibration,
    write_corpus,
)
from .fusion import BackboneCheckpoint, MergeRecipe, build_backbone
from .model import DESK_CONFIG, DenseCheckpoint, TransformerConfig, default_vocab
from .moe import MoECheckpoint, RoutingConfig, assemble_moe, moe_forward, write_trace_ndjson
from .pipeline import PipelineRunConfig, run_pipeline
from .training import TrainConfig, pretrain_dense, train_router, write_metrics_csv


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model size")
    g.add_argument("--d-model", type=int, default=DESK_CONFIG.d_model)
    g.add_argument("--n-layers", type=int, default=DESK_CONFIG.n_layers)
    g.add_argument("--n-heads", type=int, default=DESK_CONFIG.n_heads)
    g.add_argument("--d-ffn", type=int, default=DESK_CONFIG.d_ffn)
    g.add_argument("--max-seq-len", type=int, default=DESK_CONFIG.max_seq_len)


def _config_from(args, vocab_size: int) -> TransformerConfig:
    return TransformerConfig(
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ffn=args.d_ffn,
        vocab_size=vocab_size,
        max_seq_len=args.max_seq_len,
    )


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise ValueError(f"input path does not exist: {path}")
    return path


def _vocab_for(vocab_size: int) -> list[str]:
    return shared_vocab() if vocab_size == VOCAB_SIZE else default_vocab(vocab_size)


def _json_out(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_gen_corpus(args) -> None:
    seqs = gen_corpus(args.domain, args.seed, args.n_sequences, args.seq_len)
    write_corpus(seqs, args.out)


def _cmd_pretrain(args) -> None:
    seqs, vocab_size = read_corpus(_require(args.corpus))
    config = _config_from(args, vocab_size)
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        max_seq_len=args.cutoff,
        trainable="all",
    )
    ck, log = pretrain_dense(
        config, seqs, cfg, seed=args.seed, model_id=args.model_id, vocab=_vocab_for(vocab_size)
    )
    save_checkpoint(ck, args.out)
    if args.metrics:
        write_metrics_csv(log, args.metrics)


def _cmd_sample_calib(args) -> None:
    corpora = [read_corpus(_require(p))[0] for p in args.corpora]
    calib = sample_calibration(corpora, args.fraction, args.seed, biased=args.biased)
    write_calibration(calib, args.out)


def _cmd_merge_backbone(args) -> None:
    models = [load_checkpoint(_require(p), expect_kind="dense") for p in args.models]
    n = len(models)
    if args.weights:
        weights = tuple(float(w) for w in args.weights.split(","))
    else:
        weights = tuple(1.0 / n for _ in range(n))
    recipe = MergeRecipe(
        weights=weights,
        anchor_index=args.anchor_index,
        attention_strategy=args.attention,
        embedding_strategy=args.embedding,
    )
    save_checkpoint(build_backbone(models, recipe), args.out)


def _cmd_align_experts(args) -> None:
    anchor = load_checkpoint(_require(args.anchor), expect_kind="dense")
    target = load_checkpoint(_require(args.target), expect_kind="dense")
    calib = read_calibration(_require(args.calib))
    r = align_expert(
        anchor,
        target,
        calib.sequences,
        backend=args.backend,
        normalize=args.normalize_activations,
    )
    save_permutations(args.out, r)
    if args.aligned_out:
        aligned = target.astype(target.dtype)
        for layer, ffn in zip(aligned.layers, r.aligned):
            layer.ffn = ffn
        save_checkpoint(aligned, args.aligned_out)


def _cmd_assemble_moe(args) -> None:
    backbone = load_checkpoint(_require(args.backbone), expect_kind="backbone")
    experts = [load_checkpoint(_require(p), expect_kind="dense") for p in args.experts]
    moe = assemble_moe(
        backbone,
        [[l.ffn for l in e.layers] for e in experts],
        seed=args.seed,
        routing=RoutingConfig(k=args.k, renormalize=not args.no_renormalize),
        model_ids=[e.model_id or f"expert{i}" for i, e in enumerate(experts)],
    )
    save_checkpoint(moe, args.out)


def _cmd_train_router(args) -> None:
    moe = load_checkpoint(_require(args.moe), expect_kind="moe")
    calib = read_calibration(_require(args.calib))
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        max_seq_len=args.cutoff,
        lambda_bal=args.lambda_bal,
        seed=args.seed,
        trainable="router_only",
    )
    trained, log = train_router(moe, calib.sequences, cfg)
    save_checkpoint(trained, args.out)
    if args.metrics:
        write_metrics_csv(log, args.metrics)


def _cmd_eval(args) -> None:
    model = load_checkpoint(_require(args.model))
    if isinstance(model, BackboneCheckpoint):
        raise ValueError("a backbone has no expert layers to evaluate; pass a dense or moe checkpoint")
    report: dict = {"model": args.model, "perplexity": {}}
    pooled = []
    for path in args.corpus:
        seqs, _ = read_corpus(_require(path))
        report["perplexity"][os.path.basename(path)] = perplexity(model, seqs)
        pooled.extend(seqs)
    report["perplexity"]["pooled"] = perplexity(model, pooled)
    if isinstance(model, MoECheckpoint):
        trace = routing_trace_for(model, pooled)
        report["expert_usage"] = expert_usage(trace).to_dict()
        if args.trace:
            write_trace_ndjson(trace, args.trace)
    elif args.trace:
        raise ValueError("--trace requires a moe checkpoint")
    _json_out(report, args.report)


def _cmd_cka(args) -> None:
    models = [load_checkpoint(_require(p), expect_kind="dense") for p in args.models]
    naive = load_checkpoint(_require(args.naive), expect_kind="moe")
    aligned = load_checkpoint(_require(args.aligned), expect_kind="moe")
    calib = read_calibration(_require(args.calib))
    layers = tuple(int(x) for x in args.layers.split(",")) if args.layers else None
    reports = expert_cka_study(models, naive, aligned, calib.sequences, layers)
    reports_to_json(reports, args.out)
    if args.csv:
        reports_to_csv(reports, args.csv)


def _cmd_pipeline(args) -> None:
    cfg = PipelineRunConfig(
        out_dir=args.out,
        seed=args.seed,
        n_experts=args.experts,
        anchor_index=args.anchor_index,
        config=_config_from(args, VOCAB_SIZE),
        n_seq_train=args.n_seq_train,
        n_seq_eval=args.n_seq_eval,
        seq_len=args.seq_len,
        calib_fraction=args.calib_fraction,
        pretrain_lr=args.pretrain_lr,
        foundation_epochs=args.foundation_epochs,
        branch_epochs=args.branch_epochs,
        specialize_epochs=args.specialize_epochs,
        router_train=TrainConfig(
            learning_rate=args.router_lr,
            epochs=args.router_epochs,
            batch_size=args.batch_size,
            lambda_bal=args.lambda_bal,
        ),
        routing=RoutingConfig(k=args.k, renormalize=not args.no_renormalize),
        no_alignment=args.no_alignment,
        naive_attention=args.naive_attention,
        naive_embedding=args.naive_embedding,
        biased_calibration=args.biased_calibration,
        normalize_activations=args.normalize_activations,
        backend=args.backend,
    )
    run_pipeline(cfg)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moeforge",
        description="Build a mixture-of-experts model from disparate dense checkpoints.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate one synthetic domain corpus")
    p.add_argument("--domain", required=True, choices=DOMAINS)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-sequences", type=int, required=True)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="train one dense specialist on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--model-id", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--cutoff", type=int, default=128)
    p.add_argument("--metrics", default=None)
    _config_flags(p)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("sample-calib", help="draw a calibration set from corpora")
    p.add_argument("--corpora", nargs="+", required=True)
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--biased", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sample_calib)

    p = sub.add_parser("merge-backbone", help="fuse dense models into one backbone")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--attention", choices=("slerp", "linear"), default="slerp")
    p.add_argument("--embedding", choices=("selective", "linear"), default="selective")
    p.add_argument("--anchor-index", type=int, default=0)
    p.add_argument("--weights", default=None, help="comma-separated, must sum to 1")
    p.set_defaults(fn=_cmd_merge_backbone)

    p = sub.add_parser("align-experts", help="permute a target's neurons onto the anchor's order")
    p.add_argument("--anchor", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True, help="permutation JSON path")
    p.add_argument("--aligned-out", default=None, help="write the remapped dense checkpoint here")
    p.add_argument("--backend", choices=("auto", "compiled", "python"), default="auto")
    p.add_argument("--normalize-activations", action="store_true")
    p.set_defaults(fn=_cmd_align_experts)

    p = sub.add_parser("assemble-moe", help="install expert FFNs onto a backbone")
    p.add_argument("--backbone", required=True)
    p.add_argument("--experts", nargs="+", required=True, help="dense checkpoints, in expert order")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--no-renormalize", action="store_true")
    p.set_defaults(fn=_cmd_assemble_moe)

    p = sub.add_parser("train-router", help="stage-2 router-only training")
    p.add_argument("--moe", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--cutoff", type=int, default=128)
    p.add_argument("--lambda-bal", type=float, default=0.01)
    p.add_argument("--metrics", default=None)
    p.set_defaults(fn=_cmd_train_router)

    p = sub.add_parser("eval", help="perplexity (and usage, for moe) on corpora")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--trace", default=None, help="write routing trace NDJSON here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("cka", help="expert-similarity study across the three scenarios")
    p.add_argument("--models", nargs="+", required=True, help="source dense checkpoints")
    p.add_argument("--naive", required=True, help="naively merged moe checkpoint")
    p.add_argument("--aligned", required=True, help="aligned moe checkpoint")
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--layers", default=None, help="comma-separated layer indices")
    p.set_defaults(fn=_cmd_cka)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--experts", type=int, default=4, choices=(1, 2, 3, 4))
    p.add_argument("--anchor-index", type=int, default=0)
    p.add_argument("--n-seq-train", type=int, default=64)
    p.add_argument("--n-seq-eval", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--calib-fraction", type=float, default=0.25)
    p.add_argument("--pretrain-lr", type=float, default=1e-3)
    p.add_argument("--foundation-epochs", type=int, default=12)
    p.add_argument("--branch-epochs", type=int, default=2)
    p.add_argument("--specialize-epochs", type=int, default=2)
    p.add_argument("--router-lr", type=float, default=5e-5)
    p.add_argument("--router-epochs", type=int, default=6)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--lambda-bal", type=float, default=0.01)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--no-renormalize", action="store_true")
    p.add_argument("--no-alignment", action="store_true")
    p.add_argument("--naive-attention", action="store_true")
    p.add_argument("--naive-embedding", action="store_true")
    p.add_argument("--biased-calibration", action="store_true")
    p.add_argument("--normalize-activations", action="store_true")
    p.add_argument("--backend", choices=("auto", "compiled", "python"), default="auto")
    _config_flags(p)
    p.set_defaults(fn=_cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        args.fn(args)
    except (ValueError, OSError) as e:
        print(f"moeforge: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything past validation is a runtime failure
        print(f"moeforge: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
