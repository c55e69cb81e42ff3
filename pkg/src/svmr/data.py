"""Core data types and bit-exact file formats.

Feature sequences are stored in the SVMF binary format; annotations and
predictions are UTF-8 JSON-lines files.  Everything here is immutable after
load and safe to share across threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SVMF_MAGIC = b"SVMF"
SVMF_VERSION = 1


class FormatError(ValueError):
    """File does not conform to the declared binary or record layout."""


@dataclass(frozen=True)
class FeatureSequence:
    """Per-snippet feature matrix (channels x snippets) for one video."""

    video_id: str
    duration_sec: float
    data: np.ndarray  # (C_o, L) float32

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"feature data must be 2-D, got shape {self.data.shape}")
        c, length = self.data.shape
        if c < 1:
            raise ValueError("invalid channel count")
        if length < 1:
            raise ValueError("invalid snippet count")
        if not self.duration_sec > 0:
            raise ValueError(f"duration must be positive, got {self.duration_sec}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature data contains non-finite values")
        object.__setattr__(self, "data", np.ascontiguousarray(self.data, dtype=np.float32))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def snippets_per_second(self) -> float:
        return self.length / self.duration_sec


@dataclass(frozen=True, order=True)
class TemporalInstance:
    """One labeled action interval, in seconds."""

    t_start: float
    t_end: float
    class_id: int


@dataclass
class AnnotatedVideo:
    """A feature sequence together with its labeled instances."""

    features: FeatureSequence
    instances: list[TemporalInstance] = field(default_factory=list)

    @property
    def video_id(self) -> str:
        return self.features.video_id

    @property
    def duration_sec(self) -> float:
        return self.features.duration_sec

    def classes(self) -> set[int]:
        return {inst.class_id for inst in self.instances}


@dataclass(frozen=True)
class MomentPrediction:
    """A scored temporal interval inside one reference video."""

    video_id: str
    t_start: float
    t_end: float
    score: float

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"empty interval [{self.t_start}, {self.t_end}]")
        if not np.isfinite(self.score):
            raise ValueError("non-finite score")


@dataclass(frozen=True)
class QueryClip:
    """A trimmed feature sequence cut around one labeled instance."""

    features: FeatureSequence
    class_id: int
    source_video: str
    t_start: float
    t_end: float


def save_features(seq: FeatureSequence, path: str | Path) -> None:
    """Write a FeatureSequence to an SVMF file (little-endian, float32)."""
    path = Path(path)
    header = SVMF_MAGIC + struct.pack(
        "<IIIf", SVMF_VERSION, seq.channels, seq.length, seq.duration_sec)
    payload = np.ascontiguousarray(seq.data, dtype="<f4").tobytes()
    path.write_bytes(header + payload)


def load_features(path: str | Path, video_id: str | None = None) -> FeatureSequence:
    """Read an SVMF file; the video id defaults to the file's stem."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 20:
        raise FormatError(f"{path}: truncated header")
    if blob[:4] != SVMF_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, channels, length, duration = struct.unpack("<IIIf", blob[4:20])
    if version != SVMF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if channels < 1:
        raise FormatError(f"{path}: invalid channel count")
    if length < 1:
        raise FormatError(f"{path}: invalid snippet count")
    expected = 20 + 4 * channels * length
    if len(blob) != expected:
        raise FormatError(f"{path}: truncated payload ({len(blob)} of {expected} bytes)")
    data = np.frombuffer(blob[20:], dtype="<f4").reshape(channels, length)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite values in payload")
    return FeatureSequence(video_id or path.stem, float(duration), data.copy())


def validate_annotations(video: AnnotatedVideo) -> list[str]:
    """Every invariant violation as a message tagged with the instance index."""
    violations: list[str] = []
    duration = video.duration_sec
    for i, inst in enumerate(video.instances):
        if inst.t_start < 0:
            violations.append(f"instance {i}: negative start {inst.t_start}")
        if not inst.t_start < inst.t_end:
            violations.append(f"instance {i}: empty interval [{inst.t_start}, {inst.t_end}]")
        if inst.t_end > duration:
            violations.append(
                f"instance {i}: exceeds duration ({inst.t_end} > {duration})")
        if i > 0 and inst.t_start < video.instances[i - 1].t_start:
            violations.append(f"instance {i}: not sorted by start time")
    for i, a in enumerate(video.instances):
        for j, b in enumerate(video.instances):
            if i == j or a.class_id != b.class_id:
                continue
            if b.t_start <= a.t_start and a.t_end <= b.t_end:
                violations.append(f"instance {i}: nested inside same-class instance {j}")
    return violations


def snippet_span(t_start: float, t_end: float, snippets_per_second: float,
                 length: int) -> tuple[int, int]:
    """Half-open snippet-index range covering [t_start, t_end] seconds.

    The range is widened outward (floor/ceil) so every second of the interval
    is represented, then clamped to the sequence.
    """
    lo = int(np.floor(t_start * snippets_per_second))
    hi = int(np.ceil(t_end * snippets_per_second))
    lo = max(0, min(lo, length))
    hi = max(0, min(hi, length))
    return lo, hi


def _instance_to_record(inst: TemporalInstance) -> dict:
    return {"class_id": inst.class_id, "t_start": inst.t_start, "t_end": inst.t_end}


def _instance_from_record(rec: dict) -> TemporalInstance:
    return TemporalInstance(float(rec["t_start"]), float(rec["t_end"]),
                            int(rec["class_id"]))


def save_annotations(videos: list[AnnotatedVideo], path: str | Path,
                     feature_paths: dict[str, str]) -> None:
    """Write one JSON record per video; feature_paths maps id -> relative path."""
    lines = []
    for video in videos:
        rec = {
            "video_id": video.video_id,
            "duration_sec": video.duration_sec,
            "feature_path": feature_paths[video.video_id],
            "instances": [_instance_to_record(inst) for inst in video.instances],
        }
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_annotations(path: str | Path) -> list[dict]:
    """Parse annotation records; feature data is loaded separately by path."""
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid record: {exc}") from exc
        for key in ("video_id", "duration_sec", "feature_path", "instances"):
            if key not in rec:
                raise FormatError(f"{path}:{lineno}: missing field {key!r}")
        rec["instances"] = [_instance_from_record(r) for r in rec["instances"]]
        records.append(rec)
    return records


def load_annotated_video(record: dict, root: str | Path) -> AnnotatedVideo:
    features = load_features(Path(root) / record["feature_path"], record["video_id"])
    return AnnotatedVideo(features, list(record["instances"]))


def save_predictions(preds: list[tuple[str, MomentPrediction]], path: str | Path) -> None:
    """Write (query_id, prediction) rows sorted by descending score."""
    rows = sorted(preds, key=lambda qp: (-qp[1].score, qp[0], qp[1].video_id,
                                         qp[1].t_start, qp[1].t_end))
    lines = []
    for query_id, p in rows:
        lines.append(json.dumps({
            "query_id": query_id, "video_id": p.video_id,
            "t_start": p.t_start, "t_end": p.t_end, "score": p.score,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_predictions(path: str | Path) -> list[tuple[str, MomentPrediction]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append((str(rec["query_id"]),
                        MomentPrediction(str(rec["video_id"]), float(rec["t_start"]),
                                         float(rec["t_end"]), float(rec["score"]))))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: invalid prediction: {exc}") from exc
    return out
