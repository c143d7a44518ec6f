"""``tern`` command line: gen, train, embed, evaluate.

Exit codes: 0 success, 1 usage/config error, 2 data or validation error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import numerics as nx
from .config import RunConfig, apply_overrides
from .data_io import (
    Vocabulary,
    build_vocabulary,
    captions_by_image,
    clean_words,
    fold_image_ids,
    average_fold_metrics,
    gen_synthetic_dataset,
    load_captions,
    load_embeddings,
    load_region_features,
    load_splits,
    split_pairs,
    to_token_sequence,
    write_embeddings,
)
from .errors import ArgumentError, ConfigError, NumericError, ParseError, ValidationError
from .metrics import RelevanceMatrix, build_relevance_matrix, evaluate_retrieval, ndcg_curve
from .model import TERN, encode_captions, encode_images
from .training import make_pairs, train_epoch

log = logging.getLogger("tern")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ENV = "TERN_OUTPUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args.set)
    if getattr(args, "out", None):
        cfg.paths.output_dir = str(args.out)
    elif not args.config or "output_dir" not in _raw_paths(args.config):
        cfg.paths.output_dir = os.environ.get(OUTPUT_ENV, cfg.paths.output_dir)
    nx.set_precision(cfg.precision)
    return cfg


def _raw_paths(path) -> dict:
    return json.loads(Path(path).read_text()).get("paths", {})


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def load_corpus(cfg: RunConfig):
    feats = load_region_features(_need(cfg.paths.features, "features"))
    caps = load_captions(_need(cfg.paths.captions, "captions"))
    splits = load_splits(_need(cfg.paths.splits, "splits"))
    return feats, caps, splits


def model_from_checkpoint(ck, cfg: RunConfig | None = None) -> tuple:
    stored = RunConfig.from_dict(ck.meta["config"])
    if cfg is not None:
        mine = cfg.model.__dict__.copy()
        theirs = stored.model.__dict__.copy()
        mine.pop("vocab_size"), theirs.pop("vocab_size")
        diff = sorted(k for k in mine if mine[k] != theirs[k])
        if diff:
            raise ValidationError(f"config and checkpoint disagree on model fields: {', '.join(diff)}")
    vocab = Vocabulary.from_json(ck.meta["vocab"])
    model = TERN(stored.model, seed=0).astype(nx.get_dtype())
    ckpt_io.restore(ck, model)
    return model, vocab, stored


def image_recall_at_1(model: TERN, region_sets, token_seqs) -> float:
    if not region_sets or not token_seqs:
        return 0.0
    imgs = np.stack([e.vector for e in encode_images(region_sets, model)])
    caps = np.stack([e.vector for e in encode_captions(token_seqs, model)])
    ids = [rs.image_id for rs in region_sets]
    scores = caps @ imgs.T
    hits = 0
    for row, ts in zip(scores, token_seqs):
        order = sorted(range(len(ids)), key=lambda j: (-row[j], ids[j]))
        hits += ids[order[0]] == ts.image_id
    return hits / len(token_seqs)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    for name in ("images", "captions_per_image", "regions", "feat_dim", "vocab", "concepts"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
    out = Path(args.out or os.environ.get(OUTPUT_ENV, "data"))
    ds = gen_synthetic_dataset(args.seed, args.images, args.captions_per_image, args.regions,
                               args.feat_dim, args.vocab, concepts_per_image=args.concepts,
                               n_val=args.val_images, n_test=args.test_images)
    paths = ds.write(out)
    meta = {k: getattr(args, k) for k in ("seed", "images", "captions_per_image", "regions", "feat_dim",
                                           "vocab", "concepts", "val_images", "test_images")}
    (out / "gen_config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds.region_sets)} images, {len(ds.captions)} captions to {out}")
    for k, p in paths.items():
        print(f"  {k}: {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.checkpoint_every is not None:
        cfg.train.checkpoint_every = args.checkpoint_every
    cfg.validate()
    out = Path(cfg.paths.output_dir)
    ckdir = Path(cfg.paths.checkpoints)
    if not ckdir.is_absolute():
        ckdir = out / ckdir
    feats, caps, splits = load_corpus(cfg)
    train_rs, train_caps = split_pairs(feats, caps, splits["train"])
    val_rs, val_caps = split_pairs(feats, caps, splits["val"])

    start_epoch, best = 0, -1.0
    if args.resume:
        ck = ckpt_io.load(args.resume)
        model, vocab, stored = model_from_checkpoint(ck, cfg)
        cfg.model = stored.model
        adam = nx.AdamState(lr=cfg.train.lr)
        ckpt_io.restore(ck, model, adam)
        start_epoch = int(ck.meta["epoch"])
        best = float(ck.meta.get("best_recall1", -1.0))
    else:
        vocab = build_vocabulary(c.text for c in train_caps)
        cfg.model.vocab_size = len(vocab)
        model = TERN(cfg.model, seed=cfg.train.seed)
        adam = nx.AdamState(lr=cfg.train.lr)

    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    train_seqs = [to_token_sequence(c, vocab) for c in train_caps]
    val_seqs = [to_token_sequence(c, vocab) for c in val_caps]
    pairs = make_pairs(train_rs, train_seqs)
    sel_rs, sel_seqs = (val_rs, val_seqs) if val_seqs else (train_rs, train_seqs)
    sel_name = "val" if val_seqs else "train"

    log_path = out / "run.log"
    loss_csv = out / "loss.csv"
    new_csv = not loss_csv.exists() or start_epoch == 0
    with log_path.open("a" if start_epoch else "w") as logf, \
            loss_csv.open("w" if new_csv else "a", newline="") as cf:
        writer = csv.writer(cf)
        if new_csv:
            writer.writerow(["epoch", "loss", f"{sel_name}_recall1"])

        def on_batch(epoch, b, value):
            logf.write(f"epoch={epoch + 1} batch={b} loss={value!r} lr={cfg.train.lr!r} seed={cfg.train.seed}\n")

        for epoch in range(start_epoch, cfg.train.epochs):
            loss = train_epoch(model, pairs, cfg.train, adam, epoch, on_batch)
            r1 = image_recall_at_1(model, sel_rs, sel_seqs)
            logf.write(f"epoch={epoch + 1} loss={loss!r} {sel_name}_recall1={r1!r}\n")
            logf.flush()
            writer.writerow([epoch + 1, repr(loss), repr(r1)])
            print(f"epoch {epoch + 1}/{cfg.train.epochs} loss {loss:.4f} {sel_name} R@1 {r1:.3f}")
            # paths are left out so identical runs in different directories give identical bytes
            stored = {k: v for k, v in cfg.to_dict().items() if k != "paths"}
            meta = {"config": stored, "vocab": vocab.to_json(), "epoch": epoch + 1,
                    "best_recall1": max(best, r1), "format": "tern-checkpoint"}
            ckpt_io.save(ckdir / "last.ckpt", model, meta, adam)
            if r1 > best:
                best = r1
                ckpt_io.save(ckdir / "best.ckpt", model, meta, adam)
            if (epoch + 1) % cfg.train.checkpoint_every == 0:
                ckpt_io.save(ckdir / f"epoch_{epoch + 1:04d}.ckpt", model, meta, adam)
    if start_epoch >= cfg.train.epochs:
        print(f"checkpoint already at epoch {start_epoch}; nothing to do")
    return EXIT_OK


def cmd_embed(args) -> int:
    cfg = resolve_config(args)
    ck = ckpt_io.load(args.checkpoint)
    model, vocab, stored = model_from_checkpoint(ck, cfg if args.config else None)
    feats, caps, splits = load_corpus(cfg)
    rs, cs = split_pairs(feats, caps, splits[args.split])
    seqs = [to_token_sequence(c, vocab) for c in cs]
    embs = (encode_images(rs, model) if rs else []) + (encode_captions(seqs, model) if seqs else [])
    out = Path(args.output) if args.output else Path(cfg.paths.output_dir) / f"embeddings_{args.split}.jsonl"
    write_embeddings(out, embs)
    stored.paths = cfg.paths
    stored.write(out.with_suffix(".config.json"))
    print(f"wrote {len(rs)} image and {len(seqs)} caption embeddings to {out}")
    return EXIT_OK


def _evaluate_subset(image_embs, cap_embs, caps_by_img, externals, cfg, ps):
    queries = [(e.id, clean_words(caps_by_img[1][e.id].text)) for e in cap_embs]
    images = [(e.id, [clean_words(c.text) for c in caps_by_img[0].get(e.id, [])]) for e in image_embs]
    missing = [iid for iid, c in images if not c]
    if missing:
        raise ValidationError(f"images without captions: {missing[:10]}")
    relevance = {"rouge_l": build_relevance_matrix(queries, images, cfg.eval)}
    relevance.update(externals)
    gt = {e.id: caps_by_img[1][e.id].image_id for e in cap_embs}
    return evaluate_retrieval(image_embs, cap_embs, relevance, gt, cfg.eval, ps=ps)


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    embs = load_embeddings(_need(args.embeddings, "embeddings"))
    captions = load_captions(_need(cfg.paths.captions, "captions"))
    by_img = captions_by_image(captions)
    by_id = {c.caption_id: c for c in captions}
    image_embs = [e for e in embs if e.source == "image"]
    cap_embs = [e for e in embs if e.source == "caption"]
    unknown = sorted(e.id for e in cap_embs if e.id not in by_id)
    if unknown:
        raise ValidationError(f"caption embeddings without caption records: {unknown[:10]}")
    rel_path = args.relevance or cfg.paths.relevance
    externals = {}
    if rel_path:
        externals[args.relevance_name] = RelevanceMatrix.load(_need(rel_path, "relevance"))

    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "eval_config.json")
    ps = list(range(1, cfg.eval.p + 1))
    lookup = (by_img, by_id)
    if args.folds and args.folds > 1:
        folds = fold_image_ids([e.id for e in image_embs], args.folds)
        img_by_id = {e.id: e for e in image_embs}
        summaries, tables = [], []
        for k, fold in enumerate(folds):
            keep = set(fold)
            f_imgs = [img_by_id[i] for i in fold]
            f_caps = [e for e in cap_embs if by_id[e.id].image_id in keep]
            rep = _evaluate_subset(f_imgs, f_caps, lookup, externals, cfg, None)
            summaries.append(rep.summary())
            tables.append(f"fold {k + 1}\n" + rep.to_table())
        avg = average_fold_metrics([{"recall": s["recall"], "ndcg": s["ndcg"]} for s in summaries])
        (out / "folds.json").write_text(json.dumps({"folds": summaries, "mean": avg}, indent=2, sort_keys=True) + "\n")
        text = "".join(tables) + "mean over folds\n" + json.dumps(avg, sort_keys=True) + "\n"
        (out / "report.txt").write_text(text)
        print(text, end="")
        return EXIT_OK

    rep = _evaluate_subset(image_embs, cap_embs, lookup, externals, cfg, ps)
    (out / "report.txt").write_text(rep.to_table())
    (out / "report.jsonl").write_text(rep.to_jsonl())
    (out / "summary.json").write_text(json.dumps(rep.summary(), indent=2, sort_keys=True) + "\n")
    curve = ndcg_curve(rep, ps)
    with (out / "ndcg_vs_p.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p"] + list(curve))
        for i, p in enumerate(ps):
            w.writerow([p] + [repr(curve[name][i]) for name in curve])
    print(rep.to_table(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tern", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. train.lr=1e-3 (repeatable)")
        p.add_argument("--out", help=f"output directory (default: paths.output_dir or ${OUTPUT_ENV})")

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./data)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--images", type=int, default=32)
    g.add_argument("--captions-per-image", type=int, default=5)
    g.add_argument("--regions", type=int, default=6)
    g.add_argument("--feat-dim", type=int, default=32)
    g.add_argument("--vocab", type=int, default=200)
    g.add_argument("--concepts", type=int, default=4)
    g.add_argument("--val-images", type=int, default=0)
    g.add_argument("--test-images", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="write embeddings for a split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--output", help="embedding file (default: <out>/embeddings_<split>.jsonl)")
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("evaluate", help="image-retrieval Recall@K and NDCG@p")
    common(v)
    v.add_argument("--embeddings", required=True)
    v.add_argument("--relevance", help="extra precomputed relevance matrix (RELM file)")
    v.add_argument("--relevance-name", default="external")
    v.add_argument("--folds", type=int, default=0, help="average over N equal image folds")
    v.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"tern: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ParseError, ValidationError, ArgumentError) as exc:
        print(f"tern: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"tern: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
