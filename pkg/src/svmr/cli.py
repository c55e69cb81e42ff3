"""Command-line front end: corpus building, training, retrieval, evaluation.

Every command logs one ``command=... config_hash=... seed=...`` line to
``run.log`` in the output directory, so a pipeline of several invocations
leaves a machine-readable trace.  Errors print a single line to stderr and
map to exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .benchmark import (Corpus, MergeError, build_reference_set,
                        build_synth_corpus, extract_query_clips, load_corpus,
                        make_class_split, save_corpus)
from .config import (ConfigError, RunConfig, config_hash, format_config,
                     load_run_config)
from .data import (FormatError, load_annotated_video, load_annotations,
                   load_features, load_predictions, save_predictions)
from .gradsuite import run_gradient_suite
from .index import build_index, load_index, save_index, search
from .metrics import (AN_GRID, ar_at_an, auc, hr_at_k, map_at_k, prec_at_n,
                      recall_monotonicity_check)
from .postprocess import assemble_results
from .report import (format_metric, render_ar_curve_png,
                     render_loss_curves_png, write_ar_curve_csv,
                     write_metrics_report)
from .stage1 import Stage1Model, resize_batch, train_stage1
from .stage2 import Stage2Model, train_stage2

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args) -> RunConfig:
    config = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    config.validate()
    return config


def _log_run(out: Path, command: str, config: RunConfig, seed) -> None:
    seed_text = "config" if seed is None else str(seed)
    line = f"command={command} config_hash={config_hash(config)} seed={seed_text}\n"
    with open(out / "run.log", "a", encoding="utf-8") as fh:
        fh.write(line)


def _print_warnings(warnings: list[str], limit: int = 5) -> None:
    for line in warnings[:limit]:
        print(f"warning: {line}")
    if len(warnings) > limit:
        print(f"warning: ... and {len(warnings) - limit} more")


# -- corpus commands -----------------------------------------------------------


def cmd_synth_corpus(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    _log_run(out, "synth-corpus", config, args.seed)
    corpus = build_synth_corpus(config.synth, config.corpus.num_query_videos,
                                config.corpus.num_reference_videos,
                                config.corpus.split_fractions)
    target = out / "corpus"
    save_corpus(corpus, target)
    _print_warnings(corpus.warnings)
    counts = {split: len(clips) for split, clips in corpus.queries.items()}
    print(f"corpus written to {target}: "
          f"{len(corpus.references)} references, queries {counts}")
    return EXIT_OK


def cmd_build_corpus(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    _log_run(out, "build-corpus", config, args.seed)
    query_root = Path(args.query_videos).parent
    reference_root = Path(args.reference_videos).parent
    query_videos = [load_annotated_video(rec, query_root)
                    for rec in load_annotations(args.query_videos)]
    pool = [load_annotated_video(rec, reference_root)
            for rec in load_annotations(args.reference_videos)]
    class_ids = sorted({inst.class_id
                        for video in query_videos for inst in video.instances})
    if not class_ids:
        raise ValueError("query videos carry no labeled instances")
    split = make_class_split(class_ids, config.corpus.split_fractions)
    queries, query_warnings = extract_query_clips(query_videos, split)
    rng = np.random.default_rng(
        np.random.SeedSequence((config.synth.seed, 3)))
    references, merge_warnings = build_reference_set(pool, rng)
    corpus = Corpus(queries, references, split,
                    query_warnings + merge_warnings)
    target = out / "corpus"
    save_corpus(corpus, target)
    _print_warnings(corpus.warnings)
    counts = {split_name: len(clips) for split_name, clips in corpus.queries.items()}
    print(f"corpus written to {target}: "
          f"{len(corpus.references)} references, queries {counts}")
    return EXIT_OK


# -- training commands ---------------------------------------------------------


def _write_history(history: dict, columns: list[str], path: Path) -> None:
    lines = ["epoch," + ",".join(columns)]
    for epoch, values in enumerate(zip(*(history[c] for c in columns))):
        lines.append(f"{epoch}," + ",".join(f"{v:.6f}" for v in values))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train_stage1(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    _log_run(out, "train-stage1", config, args.seed)
    corpus = load_corpus(args.corpus)
    model, history = train_stage1(corpus, config.stage1, log=print)
    ckpt = out / "stage1.ckpt"
    model.save(ckpt)
    _write_history(history, ["train_loss", "val_loss"],
                   out / "stage1_history.csv")
    render_loss_curves_png(history, out / "stage1_loss.png",
                           title="retrieval encoder training")
    write_metrics_report(
        {"best_epoch": history["best_epoch"],
         "final_train_loss": history["train_loss"][-1],
         "best_val_loss": min(history["val_loss"])},
        out / "stage1_summary.txt")
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    _log_run(out, "train-stage2", config, args.seed)
    corpus = load_corpus(args.corpus)
    model, history = train_stage2(corpus, config.stage2, log=print)
    ckpt = out / "stage2.ckpt"
    model.save(ckpt)
    _write_history(history, ["train_loss", "val_auc"],
                   out / "stage2_history.csv")
    render_loss_curves_png(history, out / "stage2_loss.png",
                           title="relocalization training")
    write_metrics_report(
        {"best_epoch": history["best_epoch"],
         "final_train_loss": history["train_loss"][-1],
         "best_val_auc": max(history["val_auc"])},
        out / "stage2_summary.txt")
    _print_warnings(history.get("sampler_warnings", []))
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


# -- retrieval commands --------------------------------------------------------


def cmd_embed_gallery(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    _log_run(out, "embed-gallery", config, args.seed)
    corpus = load_corpus(args.corpus)
    model = Stage1Model.load(args.stage1)
    gallery = []
    for video in corpus.references:
        f_r = resize_batch([video.features.data], model.config.l_r)
        gallery.append((video.video_id, model.encode_reference(f_r)[0]))
    index = build_index(gallery)
    target = out / "gallery.svmidx"
    save_index(index, target)
    print(f"index with {len(index)} references written to {target}")
    return EXIT_OK


def _pipeline_settings(args, config: RunConfig):
    p = config.pipeline
    top_videos = p.top_videos if args.top_videos is None else args.top_videos
    sigma = p.soft_nms_sigma if args.soft_nms_sigma is None else args.soft_nms_sigma
    if top_videos < 1:
        raise ConfigError(f"--top-videos must be >= 1, got {top_videos}")
    if sigma <= 0:
        raise ConfigError(f"--soft-nms-sigma must be positive, got {sigma}")
    return top_videos, sigma


def cmd_query(args) -> int:
    config = _resolve_config(args)
    top_videos, sigma = _pipeline_settings(args, config)
    out = _out_dir(args)
    _log_run(out, "query", config, args.seed)
    corpus = load_corpus(args.corpus)
    index = load_index(args.index)
    stage1 = Stage1Model.load(args.stage1)
    stage2 = Stage2Model.load(args.stage2)
    references = corpus.reference_by_id()

    if args.query_features is not None:
        seq = load_features(args.query_features, video_id=args.query_id)
        clips = [(seq.video_id, seq.data)]
    else:
        if args.split not in corpus.queries:
            raise ValueError(f"unknown query split {args.split!r}")
        clips = [(q.features.video_id, q.features.data)
                 for q in corpus.queries[args.split]]
        if not clips:
            raise ValueError(f"split {args.split!r} has no query clips")

    rows = []
    for query_id, data in clips:
        if data.shape[0] != stage1.config.channels:
            raise ValueError(
                f"{query_id}: {data.shape[0]} channels, "
                f"model expects {stage1.config.channels}")
        e_q = stage1.encode_query(resize_batch([data], stage1.config.l_q))[0]
        hits = search(index, e_q, k=top_videos)
        f_q = resize_batch([data], stage2.config.l_q)
        candidates = []
        for video_id, score in hits:
            ref = references.get(video_id)
            if ref is None:
                raise ValueError(f"index entry {video_id!r} not in corpus")
            f_r = resize_batch([ref.features.data], stage2.config.l_r)
            m_c, m_r, _ = stage2.forward(f_q, f_r)
            candidates.append((video_id, score, m_c[0], m_r[0],
                               ref.duration_sec))
        _, merged = assemble_results(
            candidates, sigma=sigma,
            top_k_per_video=config.pipeline.top_clips_per_video,
            prune_threshold=config.pipeline.prune_threshold)
        rows.extend((query_id, pred) for pred in merged)

    target = out / "predictions.jsonl"
    save_predictions(rows, target)
    print(f"{len(rows)} predictions for {len(clips)} queries "
          f"written to {target}")
    return EXIT_OK


# -- evaluation ----------------------------------------------------------------


def _rankings_from_predictions(preds, queries, references):
    """Per-query video rankings, overlap pairs, and clip lists for scoring."""
    by_query: dict[str, list] = {}
    for query_id, pred in preds:
        by_query.setdefault(query_id, []).append(pred)

    rankings, relevant_sets, pairs, clip_lists = [], [], [], []
    for clip in queries:
        query_id = clip.features.video_id
        qpreds = by_query.get(query_id, [])
        seen: set[str] = set()
        ranking = []
        for pred in qpreds:
            if pred.video_id not in seen:
                seen.add(pred.video_id)
                ranking.append(pred.video_id)
        relevant = {vid for vid, video in references.items()
                    if clip.class_id in video.classes()}
        gts_by_video = {
            vid: [(inst.t_start, inst.t_end)
                  for inst in references[vid].instances
                  if inst.class_id == clip.class_id]
            for vid in relevant}
        for vid in sorted(relevant):
            vid_preds = [(p.t_start, p.t_end) for p in qpreds
                         if p.video_id == vid]
            pairs.append((vid_preds, gts_by_video[vid]))
        rankings.append(ranking)
        relevant_sets.append(relevant)
        clip_lists.append(([(p.video_id, (p.t_start, p.t_end))
                            for p in qpreds], gts_by_video))
    return rankings, relevant_sets, pairs, clip_lists


def cmd_evaluate(args) -> int:
    config = _resolve_config(args)
    tau = config.pipeline.tiou_tau if args.tiou_tau is None else args.tiou_tau
    if not 0 < tau <= 1:
        raise ConfigError(f"--tiou-tau must lie in (0, 1], got {tau}")
    out = _out_dir(args)
    _log_run(out, "evaluate", config, args.seed)
    corpus = load_corpus(args.corpus)
    if args.split not in corpus.queries:
        raise ValueError(f"unknown query split {args.split!r}")
    queries = corpus.queries[args.split]
    if not queries:
        raise ValueError(f"split {args.split!r} has no query clips")
    preds = load_predictions(args.predictions)
    references = corpus.reference_by_id()
    rankings, relevant_sets, pairs, clip_lists = _rankings_from_predictions(
        preds, queries, references)

    metrics: dict = {"queries": len(queries), "tiou_tau": tau}
    excluded = 0
    for k in (1, 5, 10):
        metrics[f"hr_at_{k}"], excluded = hr_at_k(rankings, relevant_sets, k)
        metrics[f"map_at_{k}"], _ = map_at_k(rankings, relevant_sets, k)
    metrics["queries_without_relevant"] = excluded
    ar, pairs_excluded = ar_at_an(pairs)
    metrics["auc"] = auc(ar)
    metrics["pairs_without_instances"] = pairs_excluded
    short = 0
    for n in (1, 5):
        metrics[f"prec_at_{n}"], short = prec_at_n(clip_lists, n, tau)
    metrics["short_prediction_lists"] = short
    drop = recall_monotonicity_check(ar)
    metrics["ar_monotone"] = drop is None
    if drop is not None:
        print(f"warning: {drop}")

    write_metrics_report(metrics, out / "metrics.txt")
    write_ar_curve_csv(AN_GRID, ar, out / "ar_an_curve.csv")
    render_ar_curve_png(AN_GRID, ar, out / "ar_curve.png")
    for name in sorted(metrics):
        print(f"{name} = {format_metric(metrics[name])}")
    print(f"reports written to {out}")
    return EXIT_OK


# -- verification --------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    base = 0 if args.seed is None else args.seed
    results = run_gradient_suite(seeds=tuple(range(base, base + 5)))
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:24s} seed {r.seed:3d}  err {r.err:.3e}  "
              f"tol {r.tol:.0e}  {status}")
    if failed:
        print(f"error: {len(failed)} gradient checks failed", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svmr",
        description="Two-stage semantic retrieval of video moments over "
                    "pre-extracted feature sequences.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="key = value config file (defaults when omitted)")
    common.add_argument("--seed", type=int, default=None,
                        help="override every stage seed")
    common.add_argument("--top-videos", type=int, default=None,
                        help="candidate videos per query (default 10)")
    common.add_argument("--soft-nms-sigma", type=float, default=None,
                        help="Gaussian decay width for overlap suppression "
                             "(default 0.4)")
    common.add_argument("--tiou-tau", type=float, default=None,
                        help="overlap threshold for precision (default 0.5)")
    common.add_argument("--out-dir", default=".",
                        help="directory for outputs and run.log")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", parents=[common],
                       help="generate a seeded synthetic corpus")
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("build-corpus", parents=[common],
                       help="build a corpus from annotation files")
    p.add_argument("--query-videos", required=True,
                   help="annotation jsonl for query source videos")
    p.add_argument("--reference-videos", required=True,
                   help="annotation jsonl for the reference pool")
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("train-stage1", parents=[common],
                       help="train the retrieval encoder pair")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("embed-gallery", parents=[common],
                       help="embed every reference into a search index")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--stage1", required=True, help="retrieval checkpoint")
    p.set_defaults(func=cmd_embed_gallery)

    p = sub.add_parser("train-stage2", parents=[common],
                       help="train the relocalization network")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("query", parents=[common],
                       help="retrieve and localize moments for query clips")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--index", required=True, help="gallery index file")
    p.add_argument("--stage1", required=True, help="retrieval checkpoint")
    p.add_argument("--stage2", required=True, help="relocalization checkpoint")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--query-features", default=None,
                        help="single query feature file")
    source.add_argument("--split", default=None,
                        choices=("train", "val", "test"),
                        help="run every query clip of a corpus split")
    p.add_argument("--query-id", default=None,
                   help="identifier for --query-features (default: file stem)")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score predictions against corpus annotations")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--predictions", required=True, help="predictions jsonl")
    p.add_argument("--split", required=True,
                   choices=("train", "val", "test"),
                   help="query split the predictions answer")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every operator")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _fail(code: int, exc: BaseException) -> int:
    message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (FormatError, FileNotFoundError, IsADirectoryError,
            NotADirectoryError) as exc:
        return _fail(EXIT_DATA, exc)
    except (ValueError, KeyError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    except MergeError as exc:
        return _fail(EXIT_DATA, exc)
    except RuntimeError as exc:
        return _fail(EXIT_NUMERIC, exc)


if __name__ == "__main__":
    raise SystemExit(main())
