"""Command-line interface.

Subcommands: gen-synth, train, eval, retrieve, classify, selftest.
Exit codes: 0 success, 1 validation error (including bad flags), 2 I/O or
file-format error.  Runs are fully reproducible from (argv, input files).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .adapter import AdapterConfig
from .dataio import (
    FileFormatError,
    PairedEmbeddingDataset,
    SynthConfig,
    gen_synthetic,
    load_checkpoint,
    normalize_rows,
    read_embeddings,
    save_checkpoint,
)
from .evaluation import build_report
from .inference import apply_rejection_rule, rank_scores
from .objective import model_likelihood_matrix
from .selftest import run_selftest
from .trainer import TrainConfig, train

_DIST_FLAGS = {"vmf": "vmf", "ps": "ps", "gauss": "gauss", "det": "deterministic"}
_VARIANT_FLAGS = {"asym-text": "asym_text", "asym-image": "asym_image", "sym": "symmetric"}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; the contract is exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="avlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--objects", type=int, default=500)
    p.add_argument("--captions-per-object", type=int, default=4)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kappa-image", type=float, default=200.0)
    p.add_argument("--kappa-text", type=str, default=None,
                   help="comma-separated concentrations, level 0 first (default 8,16,32,64)")

    p = sub.add_parser("train", help="train an adapter on embedding files")
    p.add_argument("--text-emb", required=True)
    p.add_argument("--image-emb", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.avlm)")
    p.add_argument("--dist", choices=sorted(_DIST_FLAGS), default="vmf")
    p.add_argument("--variant", choices=sorted(_VARIANT_FLAGS), default="asym-text")
    p.add_argument("--loss", choices=["infonce", "siglip"], default="infonce")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--lr-min", type=float, default=1e-6)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-normalize", action="store_true",
                   help="keep raw embedding rows (Gaussian-ablation inputs)")

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a report JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--text-emb", required=True)
    p.add_argument("--image-emb", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--report", required=True)
    p.add_argument("--group-stats", action="store_true")
    p.add_argument("--no-normalize", action="store_true")

    p = sub.add_parser("retrieve", help="rank candidates for one query")
    p.add_argument("--model", required=True)
    p.add_argument("--direction", choices=["t2i", "i2t"], required=True)
    p.add_argument("--embeddings", action="append", required=True,
                   help="pass twice: text embeddings first, then image embeddings")
    p.add_argument("--query-index", type=int, required=True)
    p.add_argument("--top-k", type=int, default=5)

    p = sub.add_parser("classify", help="zero-shot classification with optional rejection")
    p.add_argument("--model", required=True)
    p.add_argument("--image-emb", required=True)
    p.add_argument("--class-emb", required=True)
    p.add_argument("--rule", choices=["dummy", "threshold", "margin", "none"], default="none")
    p.add_argument("--dummy-index", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)

    sub.add_parser("selftest", help="run the directional-module oracle suite")
    return parser


def _cmd_gen_synth(args) -> int:
    kappas = None
    if args.kappa_text is not None:
        kappas = tuple(float(v) for v in args.kappa_text.split(","))
    config = SynthConfig(
        n_objects=args.objects,
        captions_per_object=args.captions_per_object,
        levels=args.levels,
        dim=args.dim,
        kappa_image=args.kappa_image,
        seed=args.seed,
        **({"kappa_text_by_level": kappas} if kappas is not None else {}),
    )
    paths = gen_synthetic(config, args.out)
    for name in ("texts", "images", "pairs", "manifest"):
        print(f"{name}\t{paths[name]}")
    return 0


def _cmd_train(args) -> int:
    dataset = PairedEmbeddingDataset.load(
        args.text_emb, args.image_emb, args.pairs, normalize=not args.no_normalize
    )
    adapter_config = AdapterConfig(
        d_in=dataset.dim,
        d_hidden=args.hidden,
        dist_family=_DIST_FLAGS[args.dist],
        variant=_VARIANT_FLAGS[args.variant],
    )
    train_config = TrainConfig(
        epochs=args.epochs,
        seed=args.seed,
        lr0=args.lr,
        lr_min=args.lr_min,
        momentum=args.momentum,
        batch_size=args.batch_size,
        loss_kind=args.loss,
    )
    model, history = train(train_config, adapter_config, dataset)
    save_checkpoint(args.out, model)
    if history.epoch_mean_losses:
        print(f"epoch losses: first {history.epoch_mean_losses[0]:.4f} "
              f"last {history.epoch_mean_losses[-1]:.4f}")
    print(f"saved {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    dataset = PairedEmbeddingDataset.load(
        args.text_emb, args.image_emb, args.pairs, normalize=not args.no_normalize
    )
    if dataset.dim != model.config.d_in:
        raise ValueError(
            f"dataset dimension {dataset.dim} does not match model dimension {model.config.d_in}"
        )
    report = build_report(model, dataset, n_bins=args.bins, include_group_stats=args.group_stats)
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    print(f"t2i recall@1 {report.overall_recall1_t2i:.4f}  "
          f"i2t recall@1 {report.overall_recall1_i2t:.4f}  "
          f"S_t2i {report.spearman_t2i:+.3f}")
    print(f"wrote {args.report}")
    return 0


def _cmd_retrieve(args) -> int:
    if len(args.embeddings) != 2:
        raise ValueError("--embeddings must be given exactly twice: text file, then image file")
    model = load_checkpoint(args.model)
    texts = normalize_rows(read_embeddings(args.embeddings[0]))
    images = normalize_rows(read_embeddings(args.embeddings[1]))
    n_queries = texts.shape[0] if args.direction == "t2i" else images.shape[0]
    if not (0 <= args.query_index < n_queries):
        raise ValueError(f"query index {args.query_index} out of range for {n_queries} queries")
    entries, _, _ = model_likelihood_matrix(model, texts, images)
    scores = entries[args.query_index] if args.direction == "t2i" else entries[:, args.query_index]
    ranking = rank_scores(scores, args.query_index)
    for rank, (idx, score) in enumerate(ranking.top_k(args.top_k), start=1):
        print(f"{rank}\t{idx}\t{score:.6f}")
    return 0


def _cmd_classify(args) -> int:
    model = load_checkpoint(args.model)
    images = normalize_rows(read_embeddings(args.image_emb))
    classes = normalize_rows(read_embeddings(args.class_emb))
    # class prompts take the text side of the kernel, images the image side
    entries, _, _ = model_likelihood_matrix(model, classes, images)
    for j in range(images.shape[0]):
        decision = apply_rejection_rule(
            entries[:, j], args.rule,
            dummy_index=args.dummy_index, threshold=args.threshold, margin=args.margin,
        )
        label = "REJECT" if decision.rejected else str(decision.predicted)
        print(f"{j}\t{label}\t{float(np.max(decision.scores)):.6f}")
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "gen-synth":
            return _cmd_gen_synth(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "retrieve":
            return _cmd_retrieve(args)
        if args.command == "classify":
            return _cmd_classify(args)
        return 0 if run_selftest() else 1
    except (FileFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
