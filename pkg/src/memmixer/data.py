"""Feature containers, score manifests, clip segmentation, and the
synthetic planted-signal dataset.

Container layout (all little-endian, fixed across platforms)::

    magic   4 bytes  b"FSMX"
    version u16      currently 1
    C       u32      channels per token
    S_a     u32      audio tokens per clip
    S_v     u32      video tokens per clip
    T       u32      clip count
    prec    u8       0 = float32, 1 = float64
    payload T clips of (audio S_a*C floats, video S_v*C floats), row-major

The manifest is a JSON-lines file: a header object naming the format,
version, and score labels, then one record object per video with fields
``id``, ``category``, ``scores`` and ``features`` (container path relative
to the manifest).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContainerFormatError, DataError
from .model import ScoreVector
from .mru import ClipFeatures

CONTAINER_MAGIC = b"FSMX"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIB")

MANIFEST_FORMAT = "feature-manifest"
MANIFEST_VERSION = 1

CATEGORIES = ("MS", "MF", "LS", "LF", "PS", "PF", "IR", "IF")


@dataclass
class ContainerMeta:
    channels: int
    s_audio: int
    s_video: int
    clips: int
    precision: int  # 32 or 64


def write_container(path, clips, precision: int = 32) -> None:
    """Write (audio, video) array pairs; shapes must agree across clips."""
    if precision not in (32, 64):
        raise ConfigError(f"container precision must be 32 or 64, got {precision}")
    if not clips:
        raise DataError("container needs at least one clip")
    a0, v0 = clips[0]
    a0 = np.asarray(a0)
    v0 = np.asarray(v0)
    if a0.ndim != 2 or v0.ndim != 2 or a0.shape[1] != v0.shape[1]:
        raise DataError(f"bad clip shapes: audio {a0.shape}, video {v0.shape}")
    c = a0.shape[1]
    s_a, s_v = a0.shape[0], v0.shape[0]
    dt = "<f4" if precision == 32 else "<f8"
    header = _HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION,
                          c, s_a, s_v, len(clips), 0 if precision == 32 else 1)
    with open(path, "wb") as fh:
        fh.write(header)
        for audio, video in clips:
            audio = np.ascontiguousarray(audio, dtype=dt)
            video = np.ascontiguousarray(video, dtype=dt)
            if audio.shape != (s_a, c) or video.shape != (s_v, c):
                raise DataError(
                    f"inconsistent clip shapes: {audio.shape}/{video.shape}"
                    f" vs ({s_a}, {c})/({s_v}, {c})"
                )
            fh.write(audio.tobytes())
            fh.write(video.tobytes())


def read_container(path):
    """Read a container; returns (clips, meta) with clips as array pairs."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContainerFormatError(
            "size-mismatch", f"{path}: file shorter than the {_HEADER.size}-byte header"
        )
    magic, version, c, s_a, s_v, t, prec_flag = _HEADER.unpack_from(raw, 0)
    if magic != CONTAINER_MAGIC:
        raise ContainerFormatError(
            "bad-magic", f"{path}: bad magic {magic!r}, expected {CONTAINER_MAGIC!r}"
        )
    if version != CONTAINER_VERSION:
        raise ContainerFormatError(
            "bad-version", f"{path}: unsupported version {version}"
        )
    if prec_flag not in (0, 1):
        raise ContainerFormatError(
            "bad-version", f"{path}: unknown precision flag {prec_flag}"
        )
    dt = np.dtype("<f4" if prec_flag == 0 else "<f8")
    expected = t * (s_a + s_v) * c * dt.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise ContainerFormatError(
            "size-mismatch",
            f"{path}: payload is {len(payload)} bytes, header declares {expected}",
        )
    flat = np.frombuffer(payload, dtype=dt)
    clips = []
    per_clip = (s_a + s_v) * c
    for i in range(t):
        block = flat[i * per_clip:(i + 1) * per_clip]
        audio = block[:s_a * c].reshape(s_a, c).copy()
        video = block[s_a * c:].reshape(s_v, c).copy()
        clips.append((audio, video))
    meta = ContainerMeta(channels=c, s_audio=s_a, s_video=s_v, clips=t,
                         precision=32 if prec_flag == 0 else 64)
    return clips, meta


@dataclass
class VideoRecord:
    video_id: str
    category: str
    scores: ScoreVector
    features: str  # container path relative to the manifest

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise DataError(
                f"unknown category {self.category!r}; expected one of {CATEGORIES}"
            )


def write_manifest(path, records) -> None:
    records = list(records)
    if not records:
        raise DataError("manifest needs at least one record")
    labels = records[0].scores.labels
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                  "score_labels": list(labels)}
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for rec in records:
            if rec.scores.labels != labels:
                raise DataError(
                    f"{rec.video_id}: score labels {rec.scores.labels} differ"
                    f" from the manifest's {labels}"
                )
            row = {
                "id": rec.video_id,
                "category": rec.category,
                "scores": [float(v) for v in rec.scores.values],
                "features": rec.features,
            }
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_manifest(path):
    """Returns (records, score_labels)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: manifest header is not valid JSON: {exc}") from exc
    if header.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a {MANIFEST_FORMAT} file")
    if header.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {header.get('version')}")
    labels = tuple(header.get("score_labels", ()))
    if not labels:
        raise DataError(f"{path}: manifest header lacks score_labels")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: bad record: {exc}") from exc
        missing = {"id", "category", "scores", "features"} - set(row)
        if missing:
            raise DataError(f"{path}:{lineno}: record lacks fields {sorted(missing)}")
        records.append(VideoRecord(
            video_id=str(row["id"]),
            category=str(row["category"]),
            scores=ScoreVector(values=row["scores"], labels=labels),
            features=str(row["features"]),
        ))
    if not records:
        raise DataError(f"{path}: manifest has no records")
    return records, labels


@dataclass
class ClipSpec:
    """Clip segmentation arithmetic: 5-second windows at 25 fps, adjacent
    windows overlapping by 3 seconds (stride 2 s)."""

    fps: int = 25
    clip_seconds: float = 5.0
    overlap_seconds: float = 3.0

    def __post_init__(self):
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if not (0 <= self.overlap_seconds < self.clip_seconds):
            raise ConfigError("need 0 <= overlap < clip length")
        if abs(self.fps * self.clip_seconds - round(self.fps * self.clip_seconds)) > 1e-9:
            raise ConfigError("fps * clip_seconds must be a whole frame count")
        if abs(self.fps * self.stride_seconds - round(self.fps * self.stride_seconds)) > 1e-9:
            raise ConfigError("fps * stride must be a whole frame count")

    @property
    def stride_seconds(self) -> float:
        return self.clip_seconds - self.overlap_seconds

    @property
    def clip_frames(self) -> int:
        return round(self.fps * self.clip_seconds)

    @property
    def stride_frames(self) -> int:
        return round(self.fps * self.stride_seconds)


def segment_stream(total_frames: int, spec: ClipSpec | None = None):
    """(start, end) frame windows; trailing frames that cannot fill a whole
    window are dropped."""
    spec = spec or ClipSpec()
    clip, stride = spec.clip_frames, spec.stride_frames
    if total_frames < clip:
        raise DataError(
            f"stream of {total_frames} frames is shorter than one {clip}-frame clip"
        )
    windows = []
    start = 0
    while start + clip <= total_frames:
        windows.append((start, start + clip))
        start += stride
    return windows


def token_segments(clip_frames: int = 125, frames_per_segment: int = 8):
    """Non-overlapping fixed-length segments inside one clip; the remainder
    that cannot fill a segment is dropped (125 frames -> 15 segments of 8)."""
    if frames_per_segment <= 0:
        raise ConfigError("frames_per_segment must be positive")
    if clip_frames < frames_per_segment:
        raise DataError(
            f"clip of {clip_frames} frames shorter than one {frames_per_segment}-frame segment"
        )
    count = clip_frames // frames_per_segment
    return [(i * frames_per_segment, (i + 1) * frames_per_segment) for i in range(count)]


SYNTH_LABELS = ("full", "long_range")


@dataclass
class SynthConfig:
    """Planted-signal generator settings.

    Each clip independently carries an audio marker and a video marker with
    probability ``marker_prob``; a marked clip has the unit marker vector
    added to every token of that modality on top of Gaussian noise.  Head 1
    is c1 * (mean per-clip marker co-occurrence) + c2 * (a_1 * v_T); head 2
    isolates the long-range term c2 * (a_1 * v_T), which ties the first
    clip's audio to the last clip's video and is invisible to any model
    that cannot carry information across clips.
    """

    seed: int = 0
    num_videos: int = 16
    t_min: int = 6
    t_max: int = 12
    channels: int = 32
    s_audio: int = 4
    s_video: int = 6
    noise: float = 0.5
    marker_prob: float = 0.5
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.num_videos < 1:
            raise ConfigError("num_videos must be >= 1")
        if not (1 <= self.t_min <= self.t_max):
            raise ConfigError(f"degenerate clip-count range [{self.t_min}, {self.t_max}]")
        if not (0.0 <= self.marker_prob <= 1.0):
            raise ConfigError("marker_prob must be in [0, 1]")
        if self.c1 < 0 or self.c2 < 0:
            raise ConfigError("c1 and c2 must be non-negative")
        if self.noise < 0:
            raise ConfigError("noise scale must be non-negative")

    def marker_vectors(self):
        """Unit-norm marker vectors (u_audio, u_video), derived from seed."""
        rng = np.random.default_rng(self.seed)
        u_a = rng.standard_normal(self.channels)
        u_a /= np.linalg.norm(u_a)
        u_v = rng.standard_normal(self.channels)
        u_v /= np.linalg.norm(u_v)
        return u_a, u_v


def synth_video(config: SynthConfig, index: int):
    """Deterministically generate one video: (clips, scores, category).

    All randomness comes from a per-video stream seeded by (seed, index),
    so generation is order-independent across videos.
    """
    rng = np.random.default_rng([config.seed, index])
    u_a, u_v = config.marker_vectors()
    t = int(rng.integers(config.t_min, config.t_max + 1))
    a_mark = (rng.random(t) < config.marker_prob).astype(np.int64)
    v_mark = (rng.random(t) < config.marker_prob).astype(np.int64)
    category = CATEGORIES[int(rng.integers(0, len(CATEGORIES)))]
    clips = []
    for i in range(t):
        audio = config.noise * rng.standard_normal((config.s_audio, config.channels))
        video = config.noise * rng.standard_normal((config.s_video, config.channels))
        if a_mark[i]:
            audio += u_a
        if v_mark[i]:
            video += u_v
        clips.append((audio, video))
    long_range = config.c2 * float(a_mark[0] * v_mark[-1])
    full = config.c1 * float((a_mark * v_mark).mean()) + long_range
    scores = ScoreVector(values=[full, long_range], labels=SYNTH_LABELS)
    return clips, scores, category


def synth_generate(config: SynthConfig, out_dir):
    """Write containers plus a manifest; returns (records, manifest_path)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(config.num_videos):
        clips, scores, category = synth_video(config, i)
        fname = f"video{i:04d}.fsmx"
        write_container(out_dir / fname, clips, precision=32)
        records.append(VideoRecord(
            video_id=f"video{i:04d}", category=category,
            scores=scores, features=fname,
        ))
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, records)
    return records, manifest_path


@dataclass
class VideoSample:
    """One loaded video ready for the model."""

    record: VideoRecord
    clips: list
    targets: np.ndarray  # (K,) float64

    @property
    def video_id(self) -> str:
        return self.record.video_id


def load_dataset(manifest_path):
    """Load every video in a manifest; returns (samples, score_labels)."""
    manifest_path = Path(manifest_path)
    records, labels = read_manifest(manifest_path)
    base = manifest_path.parent
    samples = []
    for rec in records:
        raw_clips, _meta = read_container(base / rec.features)
        clips = [ClipFeatures.from_arrays(a, v) for a, v in raw_clips]
        samples.append(VideoSample(
            record=rec, clips=clips,
            targets=np.asarray(rec.scores.values, dtype=np.float64),
        ))
    return samples, labels
