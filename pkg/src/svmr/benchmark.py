"""Benchmark construction: class splits, query extraction, video merging.

Reference sets are rebuilt from an annotated pool so that roughly one third
of the videos stay unchanged, one third become two-source composites, and
the rest become three-source composites, always without class collisions.
A seeded synthetic corpus generator provides desk-scale feature data with
the same construction pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    AnnotatedVideo,
    FeatureSequence,
    QueryClip,
    TemporalInstance,
    load_annotated_video,
    load_annotations,
    load_features,
    save_annotations,
    save_features,
    snippet_span,
    validate_annotations,
)

MERGE_RETRIES = 50


class MergeError(RuntimeError):
    """A supplement could not be merged into the base video."""


@dataclass(frozen=True)
class ClassSplit:
    train_classes: frozenset[int]
    val_classes: frozenset[int]
    test_classes: frozenset[int]

    def __post_init__(self):
        if (self.train_classes & self.val_classes
                or self.train_classes & self.test_classes
                or self.val_classes & self.test_classes):
            raise ValueError("class splits must be pairwise disjoint")

    def subset_of(self, class_id: int) -> str:
        if class_id in self.train_classes:
            return "train"
        if class_id in self.val_classes:
            return "val"
        if class_id in self.test_classes:
            return "test"
        raise KeyError(f"class {class_id} not in any split")

    def to_dict(self) -> dict:
        return {"train": sorted(self.train_classes),
                "val": sorted(self.val_classes),
                "test": sorted(self.test_classes)}

    @staticmethod
    def from_dict(d: dict) -> "ClassSplit":
        return ClassSplit(frozenset(d["train"]), frozenset(d["val"]),
                          frozenset(d["test"]))


def make_class_split(class_ids, fractions=(0.8, 0.1, 0.1)) -> ClassSplit:
    """Partition sorted class ids by the given train/val/test fractions."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be 3 values summing to 1, got {fractions}")
    ids = sorted(set(class_ids))
    n = len(ids)
    n_val = max(1, int(n * fractions[1]))
    n_test = max(1, int(n * fractions[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n} classes cannot be split with fractions {fractions}")
    return ClassSplit(frozenset(ids[:n_train]),
                      frozenset(ids[n_train:n_train + n_val]),
                      frozenset(ids[n_train + n_val:]))


def extract_query_clips(videos: list[AnnotatedVideo], split: ClassSplit
                        ) -> tuple[dict[str, list[QueryClip]], list[str]]:
    """Cut every labeled instance into a query clip, grouped by class split.

    Instances spanning less than one feature snippet are skipped and
    reported in the warning list.
    """
    queries: dict[str, list[QueryClip]] = {"train": [], "val": [], "test": []}
    warnings: list[str] = []
    for video in videos:
        seq = video.features
        sps = seq.snippets_per_second
        for k, inst in enumerate(video.instances):
            lo, hi = snippet_span(inst.t_start, inst.t_end, sps, seq.length)
            if hi <= lo or (inst.t_end - inst.t_start) * sps < 1.0 - 1e-9:
                warnings.append(
                    f"{video.video_id}: instance {k} shorter than one snippet, skipped")
                continue
            clip_id = f"{video.video_id}:q{k}"
            clip_seq = FeatureSequence(clip_id, (hi - lo) / sps,
                                       seq.data[:, lo:hi].copy())
            clip = QueryClip(clip_seq, inst.class_id, video.video_id,
                             inst.t_start, inst.t_end)
            queries[split.subset_of(inst.class_id)].append(clip)
    return queries, warnings


def cut_instance_segment(video: AnnotatedVideo, instance_idx: int,
                         margin_sec: float = 1.0) -> tuple[np.ndarray, TemporalInstance]:
    """Extract one instance plus up to margin_sec of background per side.

    The margin is clamped to the background actually available between this
    instance and its same-video neighbors, and the cut is snippet-aligned.
    Returns the feature slice and the instance interval relative to it.
    """
    seq = video.features
    sps = seq.snippets_per_second
    inst = video.instances[instance_idx]
    lo, hi = snippet_span(inst.t_start, inst.t_end, sps, seq.length)
    margin = int(round(margin_sec * sps))
    prev_hi = 0
    next_lo = seq.length
    for j, other in enumerate(video.instances):
        if j == instance_idx:
            continue
        o_lo, o_hi = snippet_span(other.t_start, other.t_end, sps, seq.length)
        if o_hi <= lo:
            prev_hi = max(prev_hi, o_hi)
        if o_lo >= hi:
            next_lo = min(next_lo, o_lo)
    seg_lo = max(prev_hi, lo - margin)
    seg_hi = min(next_lo, hi + margin)
    rel = TemporalInstance((lo - seg_lo) / sps, (hi - seg_lo) / sps, inst.class_id)
    return seq.data[:, seg_lo:seg_hi].copy(), rel


def insert_segment(base: AnnotatedVideo, segment: np.ndarray,
                   rel_instance: TemporalInstance, snippet_pos: int,
                   merged_id: str | None = None) -> AnnotatedVideo:
    """Splice a feature segment into the base at a snippet boundary.

    Base instances at or after the insertion point shift right by the
    segment's duration; the inserted instance lands at the insertion time
    plus its offset within the segment.
    """
    seq = base.features
    sps = seq.snippets_per_second
    if not 0 <= snippet_pos <= seq.length:
        raise ValueError(f"insertion point {snippet_pos} outside [0, {seq.length}]")
    seg_len = segment.shape[1]
    shift = seg_len / sps
    t_insert = snippet_pos / sps
    data = np.concatenate([seq.data[:, :snippet_pos], segment.astype(np.float32),
                           seq.data[:, snippet_pos:]], axis=1)
    instances = []
    for inst in base.instances:
        if inst.t_start >= t_insert:
            instances.append(TemporalInstance(inst.t_start + shift,
                                              inst.t_end + shift, inst.class_id))
        else:
            instances.append(inst)
    instances.append(TemporalInstance(t_insert + rel_instance.t_start,
                                      t_insert + rel_instance.t_end,
                                      rel_instance.class_id))
    instances.sort()
    merged = AnnotatedVideo(
        FeatureSequence(merged_id or seq.video_id, (seq.length + seg_len) / sps, data),
        instances)
    violations = validate_annotations(merged)
    if violations:
        raise MergeError(f"merge produced invalid annotations: {violations}")
    return merged


def _background_positions(video: AnnotatedVideo) -> np.ndarray:
    """Snippet boundaries not strictly inside any labeled instance."""
    seq = video.features
    sps = seq.snippets_per_second
    ok = np.ones(seq.length + 1, dtype=bool)
    for inst in video.instances:
        lo, hi = snippet_span(inst.t_start, inst.t_end, sps, seq.length)
        ok[lo + 1:hi] = False
    return np.flatnonzero(ok)


def merge_videos(base: AnnotatedVideo, supplements: list[AnnotatedVideo],
                 rng: np.random.Generator, margin_sec: float = 1.0) -> AnnotatedVideo:
    """Cut one instance segment from each supplement into the base video.

    All inputs must share a snippet rate; supplements must be class-disjoint
    from the base and carry at least one instance.
    """
    merged = base
    merged_id = base.video_id
    for sup in supplements:
        if abs(sup.features.snippets_per_second
               - merged.features.snippets_per_second) > 1e-9:
            raise MergeError(
                f"snippet rate mismatch: {sup.video_id} vs {merged.video_id}")
        if not sup.instances:
            raise ValueError(f"supplement {sup.video_id} has no instances")
        overlap = sup.classes() & merged.classes()
        if overlap:
            raise ValueError(
                f"supplement {sup.video_id} shares classes {sorted(overlap)} with base")
        idx = int(rng.integers(len(sup.instances)))
        segment, rel = cut_instance_segment(sup, idx, margin_sec)
        positions = _background_positions(merged)
        if positions.size == 0:
            raise MergeError(f"no background insertion point in {merged.video_id}")
        pos = int(positions[rng.integers(positions.size)])
        merged_id = f"{merged_id}+{sup.video_id}"
        merged = insert_segment(merged, segment, rel, pos, merged_id)
    return merged


def build_reference_set(pool: list[AnnotatedVideo], rng: np.random.Generator
                        ) -> tuple[list[AnnotatedVideo], list[str]]:
    """Rebuild a reference corpus as a 1/3 unchanged, 1/3 two-source,
    1/3 three-source mix (ceil/floor/remainder for sizes not divisible by 3).

    Supplements are drawn from the whole pool; a merge that cannot find
    class-disjoint supplements within a bounded number of retries falls back
    to emitting the base unchanged, with a warning.
    """
    n = len(pool)
    if n < 3:
        raise ValueError(f"need at least 3 pool videos, got {n}")
    n_unchanged = -(-n // 3)
    n_two = n // 3
    order = rng.permutation(n)
    warnings: list[str] = []
    out: list[AnnotatedVideo] = []
    for rank, idx in enumerate(order):
        video = pool[idx]
        n_sources = 1 if rank < n_unchanged else (2 if rank < n_unchanged + n_two else 3)
        if n_sources == 1:
            out.append(video)
            continue
        merged = None
        for _attempt in range(MERGE_RETRIES):
            picks = [pool[int(rng.integers(n))] for _ in range(n_sources - 1)]
            classes = [video.classes()] + [p.classes() for p in picks]
            union = set().union(*classes)
            if len(union) != sum(len(c) for c in classes):
                continue
            if any(not p.instances for p in picks):
                continue
            merged = merge_videos(video, picks, rng)
            break
        if merged is None:
            warnings.append(
                f"{video.video_id}: no class-disjoint supplements found, kept unchanged")
            out.append(video)
        else:
            out.append(merged)
    return out, warnings


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the seeded synthetic feature corpus."""

    num_classes: int = 20
    channels: int = 64
    snippets_per_second: float = 1.0
    sigma_proto: float = 1.0
    sigma_inst: float = 0.1
    sigma_bg: float = 0.1
    min_instances: int = 1
    max_instances: int = 3
    min_instance_snippets: int = 4
    max_instance_snippets: int = 10
    min_gap_snippets: int = 2
    max_gap_snippets: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.sigma_proto <= 0:
            raise ValueError("prototype scale must be positive")
        if min(self.sigma_inst, self.sigma_bg) < 0:
            raise ValueError("noise scales must be non-negative")
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ValueError("invalid instance-count range")
        if self.min_instance_snippets < 1:
            raise ValueError("instances must span at least one snippet")


def _synth_video(config: SynthConfig, prototypes: np.ndarray, background: np.ndarray,
                 class_id: int, video_id: str, rng: np.random.Generator
                 ) -> AnnotatedVideo:
    k = int(rng.integers(config.min_instances, config.max_instances + 1))
    durations = rng.integers(config.min_instance_snippets,
                             config.max_instance_snippets + 1, size=k)
    gaps = rng.integers(config.min_gap_snippets, config.max_gap_snippets + 1, size=k + 1)
    length = int(durations.sum() + gaps.sum())
    sps = config.snippets_per_second
    data = background[:, None] + rng.normal(0, config.sigma_bg,
                                            (config.channels, length))
    instances = []
    cursor = 0
    for d, g in zip(durations, gaps):
        cursor += int(g)
        data[:, cursor:cursor + d] = (prototypes[class_id][:, None]
                                      + rng.normal(0, config.sigma_inst,
                                                   (config.channels, int(d))))
        instances.append(TemporalInstance(cursor / sps, (cursor + int(d)) / sps,
                                          class_id))
        cursor += int(d)
    seq = FeatureSequence(video_id, length / sps, data.astype(np.float32))
    return AnnotatedVideo(seq, instances)


def synth_prototypes(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-class prototype vectors and the shared background prototype.

    Prototypes share a low-rank orthonormal basis instead of being drawn
    independently per class. Features from a pretrained backbone have the
    same property (unseen actions are new combinations of seen motifs),
    and retrieval across a class-disjoint split is only well-posed when
    held-out classes stay inside the span of the training classes.
    """
    proto_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
    # 3/4 of the classes: low enough that a training split still spans the
    # basis, high enough that its classes can embed near-orthogonally
    rank = min(config.channels,
               max(2, min(3 * config.num_classes // 4, config.channels // 2)))
    basis, _ = np.linalg.qr(proto_rng.standard_normal((config.channels, rank)))
    coords = proto_rng.normal(0, config.sigma_proto, (config.num_classes, rank))
    # scale so E||prototype||^2 matches an i.i.d. per-channel draw
    prototypes = coords @ basis.T * np.sqrt(config.channels / rank)
    background = proto_rng.normal(0, config.sigma_proto, config.channels)
    return prototypes, background


def synth_generate(config: SynthConfig, num_query_videos: int,
                   num_reference_videos: int
                   ) -> tuple[list[AnnotatedVideo], list[AnnotatedVideo], list[str]]:
    """Generate seeded single-class source videos and build the reference mix.

    Classes rotate round-robin over both pools so every class is covered.
    Returns (query source videos, constructed references, warnings).
    """
    prototypes, background = synth_prototypes(config)

    def pool(kind: str, count: int, offset: int) -> list[AnnotatedVideo]:
        videos = []
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence(
                (config.seed, offset, i)))
            class_id = i % config.num_classes
            videos.append(_synth_video(config, prototypes, background, class_id,
                                       f"{kind}{i:04d}", rng))
        return videos

    v1 = pool("q", num_query_videos, 1)
    v2_pool = pool("r", num_reference_videos, 2)
    build_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 3)))
    references, warnings = build_reference_set(v2_pool, build_rng)
    return v1, references, warnings


@dataclass
class Corpus:
    """A built benchmark: query clips by split, references, class split."""

    queries: dict[str, list[QueryClip]]
    references: list[AnnotatedVideo]
    class_split: ClassSplit
    warnings: list[str] = field(default_factory=list)

    def reference_by_id(self) -> dict[str, AnnotatedVideo]:
        return {v.video_id: v for v in self.references}


def build_synth_corpus(config: SynthConfig, num_query_videos: int,
                       num_reference_videos: int,
                       split_fractions=(0.8, 0.1, 0.1)) -> Corpus:
    v1, references, warnings = synth_generate(config, num_query_videos,
                                              num_reference_videos)
    split = make_class_split(range(config.num_classes), split_fractions)
    queries, q_warnings = extract_query_clips(v1, split)
    return Corpus(queries, references, split, warnings + q_warnings)


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    """Write manifest, feature files, and annotation records for a corpus."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    ref_paths = {}
    for video in corpus.references:
        rel = f"features/{video.video_id}.svmf"
        save_features(video.features, out / rel)
        ref_paths[video.video_id] = rel
    save_annotations(corpus.references, out / "references.jsonl", ref_paths)

    query_lines = []
    for split_name in ("train", "val", "test"):
        for clip in corpus.queries[split_name]:
            qid = clip.features.video_id
            rel = f"features/{qid.replace(':', '_')}.svmf"
            save_features(clip.features, out / rel)
            query_lines.append(json.dumps({
                "query_id": qid, "class_id": clip.class_id, "split": split_name,
                "source_video": clip.source_video, "t_start": clip.t_start,
                "t_end": clip.t_end, "duration_sec": clip.features.duration_sec,
                "feature_path": rel,
            }, sort_keys=True))
    (out / "queries.jsonl").write_text(
        "\n".join(query_lines) + ("\n" if query_lines else ""), encoding="utf-8")

    manifest = {
        "class_split": corpus.class_split.to_dict(),
        "queries": {s: [c.features.video_id for c in corpus.queries[s]]
                    for s in ("train", "val", "test")},
        "references": [v.video_id for v in corpus.references],
        "warnings": corpus.warnings,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    split = ClassSplit.from_dict(manifest["class_split"])
    records = load_annotations(root / "references.jsonl")
    references = [load_annotated_video(rec, root) for rec in records]

    queries: dict[str, list[QueryClip]] = {"train": [], "val": [], "test": []}
    for line in (root / "queries.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        seq = load_features(root / rec["feature_path"], rec["query_id"])
        queries[rec["split"]].append(QueryClip(
            seq, int(rec["class_id"]), rec["source_video"],
            float(rec["t_start"]), float(rec["t_end"])))
    return Corpus(queries, references, split, list(manifest.get("warnings", [])))
