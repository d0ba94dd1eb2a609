"""``glstm`` command line: cca-fit, train, generate, eval, retrieve.

Exit codes: 0 success, 2 bad input or configuration, 3 numeric failure,
4 I/O failure. Output files are written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from glstm import captioner, decoder, metrics, semspace
from glstm.container import atomic_write_text
from glstm.errors import BadInputError, ConfigError, GlstmError
from glstm.textcorpus import Corpus, build_vocab, fit_tfidf, load_features, load_manifest, tokenize


def _print(*args) -> None:
    print(*args, flush=True)


def _load_split(manifest, split: str) -> Corpus:
    corpus = load_manifest(manifest).split(split)
    if len(corpus) == 0:
        raise BadInputError(f"manifest {manifest} has no '{split}' items")
    return corpus


def _index_path(cca_path) -> Path:
    return Path(str(cca_path) + ".index")


# --- cca-fit -------------------------------------------------------------------


def cmd_cca_fit(args) -> int:
    train = _load_split(args.manifest, "train")
    vectorizer = fit_tfidf(train.captions(), args.tfidf_vocab)
    X1, X2 = semspace.paired_views(train, vectorizer, args.text_view)
    d = args.cca_dim
    limit = min(X1.shape[1], X2.shape[1])
    if d > limit:
        _print(f"note: --cca-dim {d} exceeds min(view dims) = {limit}; using {limit}")
        d = limit
    model = semspace.fit_cca(X1, X2, d, args.cca_p, args.ridge)
    index = semspace.build_index(model, vectorizer, train)
    extra = {"text_view": args.text_view, "feature_dim": train.feature_dim}
    semspace.save_cca(args.out, model, vectorizer, extra)
    semspace.save_index(_index_path(args.out), index)
    top = ", ".join(f"{c:.4f}" for c in model.D[:10])
    _print(f"canonical correlations (top {min(10, model.dim)}): {top}")
    if args.figures:
        from glstm import plotting

        plotting.correlation_curve(model.D.tolist(), model.p, Path(args.figures) / "cca_correlations.png")
    return 0


# --- guidance plumbing ------------------------------------------------------------


def _guidance_source(kind: str | None, cca_path, top_t: int, exclude_self: bool):
    """Return ``(provider, guidance_dim)``; ``provider(item)`` builds the guidance vector."""
    if kind is None:
        return None, None
    if kind == "img":
        return (lambda item: semspace.build_guidance("img", item.feature).vector), None
    if cca_path is None:
        raise ConfigError(f"--guidance {kind} needs --cca")
    cca, vectorizer, _ = semspace.load_cca(cca_path)
    index = semspace.load_index(_index_path(cca_path)) if kind == "ret" else None

    def provider(item):
        exclude = item.image_id if exclude_self else None
        return semspace.build_guidance(kind, item.feature, cca, index, vectorizer, top_t, exclude).vector

    return provider, semspace.guidance_dim(kind, 0, cca, vectorizer)


# --- train -------------------------------------------------------------------------


def cmd_train(args) -> int:
    corpus = load_manifest(args.manifest)
    train, val = corpus.split("train"), corpus.split("val")
    if len(train) == 0 or len(val) == 0:
        raise BadInputError("training needs 'train' and 'val' items in the manifest")
    if args.cell == "lstm" and args.guidance is not None:
        raise ConfigError("--guidance requires --cell glstm")
    if args.cell == "glstm" and args.guidance is None:
        raise ConfigError("--cell glstm requires --guidance {ret,emb,img}")
    provider, gdim = _guidance_source(args.guidance, args.cca, args.top_t, exclude_self=True)
    if args.guidance == "img":
        gdim = corpus.feature_dim

    opt_state = None
    start_epoch = 0
    if args.resume:
        model, opt_state = captioner.load_checkpoint(args.resume, with_optimizer=True)
        start_epoch = int(model.meta.get("epoch", 0))
        if (model.guidance_kind or None) != args.guidance:
            raise ConfigError("--guidance does not match the checkpoint being resumed")
    else:
        vocab = build_vocab(train.captions(), args.min_count)
        model = captioner.init_model(
            vocab, corpus.feature_dim, args.embed, args.hidden,
            guidance_dim=gdim if args.cell == "glstm" else None,
            guidance_kind=args.guidance, seed=args.seed,
            zero_guidance=args.zero_guidance_init,
        )
    mu, sigma = decoder.length_stats(train.captions())
    model.meta = dict(model.meta, length_stats=[mu, sigma])

    config = captioner.TrainConfig(
        lr=args.lr, dropout=args.dropout, max_epochs=args.epochs, patience=args.patience, seed=args.seed
    )
    log_lines: list[str] = []

    def on_epoch(entry):
        log_lines.append(json.dumps(entry, sort_keys=True))
        _print(
            f"epoch {entry['epoch']}: train ppl {entry['train_ppl']:.4f}  val ppl {entry['val_ppl']:.4f}"
            + ("  *" if entry["improved"] else "")
        )

    result = captioner.train(model, train, val, provider, config, start_epoch, opt_state, on_epoch)
    captioner.save_checkpoint(result.model, args.out, result.optimizer_state)
    log_path = args.log or str(args.out) + ".log.jsonl"
    atomic_write_text(log_path, "".join(line + "\n" for line in log_lines))
    train_ex = captioner.make_examples(result.model, train, provider)
    final = captioner.evaluate(result.model, train_ex)
    _print(f"stopped after epoch {result.last_epoch}; best epoch {result.best_epoch}")
    _print(f"final train perplexity {final.perplexity:.6f}")
    if args.figures and result.log:
        from glstm import plotting

        plotting.training_curve(result.log, Path(args.figures) / "training_curve.png")
    return 0


# --- generate ----------------------------------------------------------------------


def _length_norm(args, model) -> decoder.LengthNorm:
    mu, sigma = args.mu, args.sigma
    stats = model.meta.get("length_stats")
    if stats is not None:
        mu = stats[0] if mu is None else mu
        sigma = stats[1] if sigma is None else sigma
    if args.norm in ("none", "polynomial"):
        return decoder.LengthNorm(args.norm, m=args.norm_m)
    return decoder.LengthNorm(args.norm, m=args.norm_m, mu=mu, sigma=sigma)


def _threads() -> int:
    raw = os.environ.get("GLSTM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"GLSTM_THREADS must be an integer, got {raw!r}") from exc


def cmd_generate(args) -> int:
    model = captioner.load_checkpoint(args.model)
    items = _load_split(args.manifest, args.split).items
    provider, _ = _guidance_source(model.guidance_kind, args.cca, args.top_t, exclude_self=False)
    config = decoder.DecodeConfig(args.beam_width, args.max_length, _length_norm(args, model))

    def run(item):
        g = provider(item) if provider is not None else None
        res = decoder.beam_search(model, item.feature, g, config)
        words = model.vocab.decode(res.best.tokens)
        return {"id": item.image_id, "caption": " ".join(words), "score": res.score, "length": len(words)}

    items = sorted(items, key=lambda it: it.image_id)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(run, items))
    atomic_write_text(args.out, "".join(json.dumps(r) + "\n" for r in rows))
    lengths = [r["length"] for r in rows]
    _print(f"generated {len(rows)} captions; mean length {np.mean(lengths):.2f} ({np.std(lengths):.2f})")
    return 0


# --- eval ---------------------------------------------------------------------------


def read_generations(path) -> list[dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise BadInputError(f"generation file not found: {path}") from exc
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BadInputError(f"{path}:{n}: malformed JSON line") from exc
        if not isinstance(row, dict) or "id" not in row or "caption" not in row:
            raise BadInputError(f"{path}:{n}: expected an object with 'id' and 'caption'")
        rows.append(row)
    if not rows:
        raise BadInputError(f"generation file {path} is empty")
    return rows


def cmd_eval(args) -> int:
    rows = read_generations(args.generated)
    items = _load_split(args.manifest, args.split).by_id()
    missing = sorted({str(r["id"]) for r in rows if str(r["id"]) not in items})
    if missing:
        raise BadInputError(f"generated ids not in the '{args.split}' split: {', '.join(missing)}")
    pairs = [metrics.EvalPair(tokenize(r["caption"]), items[str(r["id"])].captions) for r in rows]
    report = metrics.score_report(pairs)
    gen_lengths = [len(p.candidate) for p in pairs]
    ref_lengths = [len(c) for p in pairs for c in p.references]
    report["length_mean"] = float(np.mean(gen_lengths))
    report["length_std"] = float(np.std(gen_lengths))
    report["reference_length_mean"] = float(np.mean(ref_lengths))
    report["reference_length_std"] = float(np.std(ref_lengths))
    for k in ("B1", "B2", "B3", "B4"):
        _print(f"{k}: {100 * report[k]:.2f}")
    _print(f"generated length: {report['length_mean']:.2f} ({report['length_std']:.2f})")
    _print(f"reference length: {report['reference_length_mean']:.2f} ({report['reference_length_std']:.2f})")
    _print("METEOR, CIDEr: not computed (need external linguistic resources)")
    if args.out:
        atomic_write_text(args.out, json.dumps(report, indent=1, sort_keys=True) + "\n")
    if args.figures:
        from glstm import plotting

        fig_dir = Path(args.figures)
        plotting.length_histogram(gen_lengths, ref_lengths, fig_dir / "caption_lengths.png")
        plotting.bleu_bars(report, fig_dir / "bleu.png")
    return 0


# --- retrieve ----------------------------------------------------------------------


def cmd_retrieve(args) -> int:
    cca, _, _ = semspace.load_cca(args.cca)
    index = semspace.load_index(args.index or _index_path(args.cca))
    if args.feature_file:
        m = load_features(args.feature_file)
        if m.shape[0] != 1:
            raise BadInputError(f"{args.feature_file} must hold exactly one feature row")
        feature = m[0]
    elif args.image_id and args.manifest:
        items = load_manifest(args.manifest).by_id()
        if args.image_id not in items:
            raise BadInputError(f"unknown image id {args.image_id!r}")
        feature = items[args.image_id].feature
    else:
        raise ConfigError("retrieve needs --feature-file, or --image-id with --manifest")
    hits = semspace.retrieve(cca, index, feature, args.top_t)
    for rank, h in enumerate(hits, 1):
        _print(f"{rank}\t{h.score:.6f}\t{h.item_id}\t{h.caption_index}\t{' '.join(index.captions[h.row])}")
    return 0


# --- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glstm", description="Guided-LSTM caption generation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cca-fit", help="fit TF-IDF + normalized CCA on the training split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="CCA model path; the index goes to <out>.index")
    p.add_argument("--cca-dim", type=int, default=200)
    p.add_argument("--cca-p", type=float, default=4.0)
    p.add_argument("--tfidf-vocab", type=int, default=3000)
    p.add_argument("--text-view", choices=("caption", "image"), default="caption")
    p.add_argument("--ridge", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; fitting is deterministic")
    p.add_argument("--figures", help="directory for report figures")
    p.set_defaults(func=cmd_cca_fit)

    p = sub.add_parser("train", help="train an LSTM or gLSTM caption model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cell", choices=("lstm", "glstm"), default="lstm")
    p.add_argument("--guidance", choices=semspace.GUIDANCE_KINDS)
    p.add_argument("--cca")
    p.add_argument("--top-t", type=int, default=15)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--embed", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-guidance-init", action="store_true", help="start all guidance matrices at zero")
    p.add_argument("--resume", help="continue training from this checkpoint")
    p.add_argument("--log", help="JSONL training log (default <out>.log.jsonl)")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="beam-search captions for a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cca")
    p.add_argument("--split", default="test")
    p.add_argument("--norm", choices=decoder.NORM_KINDS, default="none")
    p.add_argument("--norm-m", type=float, default=1.0)
    p.add_argument("--mu", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--beam-width", type=int, default=10)
    p.add_argument("--max-length", type=int, default=30)
    p.add_argument("--top-t", type=int, default=15)
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; decoding is deterministic")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="corpus BLEU and length statistics of generated captions")
    p.add_argument("--generated", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="JSON score report")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="rank training captions for an image")
    p.add_argument("--cca", required=True)
    p.add_argument("--index")
    p.add_argument("--manifest")
    p.add_argument("--image-id")
    p.add_argument("--feature-file")
    p.add_argument("--top-t", type=int, default=15)
    p.set_defaults(func=cmd_retrieve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GlstmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
