"""Video feature records, the WTALF1 feature container, annotations and a
synthetic dataset generator with known frame-level ground truth."""

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument

FEATURE_MAGIC = b"WTALF1"
_HEADER = struct.Struct("<6sII")
SEGMENT_FRAMES = 16
BACKGROUND = 0


@dataclass(frozen=True, eq=False)
class VideoRecord:
    video_id: str
    rgb: np.ndarray  # (D, T)
    flow: np.ndarray  # (D, T)
    video_labels: frozenset
    fps: float
    gt_segments: tuple | None = None  # ((class, start_s, end_s), ...)

    def __post_init__(self):
        if self.rgb.shape != self.flow.shape or self.rgb.ndim != 2:
            raise InvalidArgument(
                f"{self.video_id}: rgb {self.rgb.shape} and flow {self.flow.shape} must be equal (D, T)"
            )
        if not self.video_labels:
            raise InvalidArgument(f"{self.video_id}: at least one video-level label is required")
        if not self.fps > 0:
            raise InvalidArgument(f"{self.video_id}: fps must be positive")
        for c, start, end in self.gt_segments or ():
            if c not in self.video_labels:
                raise InvalidArgument(f"{self.video_id}: segment class {c} not in video labels")
            if not 0 <= start < end:
                raise InvalidArgument(f"{self.video_id}: bad segment [{start}, {end}]")

    @property
    def length(self):
        return self.rgb.shape[1]

    @property
    def dim(self):
        return self.rgb.shape[0]

    def fused(self):
        return fuse_streams(self.rgb, self.flow)

    def step_seconds(self):
        return SEGMENT_FRAMES / self.fps

    def frame_labels(self):
        """Per-step class ids (0 = background) rasterized from gt segments.

        A step is an action step when its center second falls inside a segment.
        """
        if self.gt_segments is None:
            raise InvalidArgument(f"{self.video_id}: no ground-truth segments")
        labels = np.zeros(self.length, dtype=int)
        centers = (np.arange(self.length) + 0.5) * self.step_seconds()
        for c, start, end in self.gt_segments:
            labels[(centers >= start) & (centers < end)] = c
        return labels


@dataclass(frozen=True)
class Dataset:
    class_count: int
    records: tuple

    def __post_init__(self):
        dims = {r.dim for r in self.records}
        if len(dims) > 1:
            raise InvalidArgument(f"records disagree on feature dimension: {sorted(dims)}")
        for r in self.records:
            bad = [c for c in r.video_labels if not 1 <= c <= self.class_count]
            if bad:
                raise InvalidArgument(f"{r.video_id}: class ids {bad} outside 1..{self.class_count}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def dim(self):
        return self.records[0].dim if self.records else 0

    def by_id(self):
        return {r.video_id: r for r in self.records}


def steps_to_seconds(step, fps):
    return step * SEGMENT_FRAMES / fps


def seconds_to_steps(seconds, fps):
    return seconds * fps / SEGMENT_FRAMES


def fuse_streams(rgb, flow):
    """Stack rgb rows over flow rows into a (2D, T) matrix."""
    rgb = np.asarray(rgb, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if rgb.ndim != 2 or flow.ndim != 2:
        raise InvalidArgument("streams must be 2-D (D, T) matrices")
    if rgb.shape[1] != flow.shape[1]:
        raise InvalidArgument(f"stream lengths differ: {rgb.shape[1]} vs {flow.shape[1]}")
    if rgb.shape[0] != flow.shape[0]:
        raise InvalidArgument(f"stream dims differ: {rgb.shape[0]} vs {flow.shape[0]}")
    if rgb.shape[0] == 0:
        raise InvalidArgument("streams have no feature channels")
    return np.concatenate([rgb, flow], axis=0)


# -- files ------------------------------------------------------------------


def atomic_write(path, payload):
    """Write bytes or text via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(payload, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def encode_features(matrix):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise InvalidArgument(f"expected a (D, T) matrix, got shape {matrix.shape}")
    d, t = matrix.shape
    body = np.ascontiguousarray(matrix.T, dtype="<f4").tobytes()
    return _HEADER.pack(FEATURE_MAGIC, t, d) + body


def decode_features(blob):
    if len(blob) < len(FEATURE_MAGIC) or blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FormatError("bad magic, expected WTALF1", 0)
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob))
    _, t, d = _HEADER.unpack_from(blob)
    payload = len(blob) - _HEADER.size
    if payload != 4 * t * d:
        raise FormatError(
            f"header declares T={t}, D={d} ({t * d} floats) but payload holds {payload / 4:g}",
            _HEADER.size + min(payload, 4 * t * d),
        )
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(t, d)
    return values.T.astype(np.float64)


def load_features(path):
    """Read a WTALF1 file into a (D, T) float64 matrix."""
    return decode_features(Path(path).read_bytes())


def save_features(path, matrix):
    atomic_write(path, encode_features(matrix))


def load_annotations(path, features_dir=None, class_count=None):
    """Build a Dataset from a JSON-lines annotation file.

    Feature paths are resolved against ``features_dir`` when given, else
    against the annotation file's directory.
    """
    path = Path(path)
    root = Path(features_dir) if features_dir is not None else path.parent
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                segments = row.get("segments")
                records.append(VideoRecord(
                    video_id=str(row["video_id"]),
                    rgb=load_features(root / row["rgb_path"]),
                    flow=load_features(root / row["flow_path"]),
                    video_labels=frozenset(int(c) for c in row["labels"]),
                    fps=float(row["fps"]),
                    gt_segments=None if segments is None else tuple(
                        (int(c), float(s), float(e)) for c, s, e in segments
                    ),
                ))
            except KeyError as exc:
                raise InvalidArgument(f"{path}:{line_no}: missing field {exc}") from None
    if class_count is None:
        class_count = max((max(r.video_labels) for r in records), default=0)
    return Dataset(class_count, tuple(records))


def annotation_row(record, rgb_path, flow_path):
    row = {
        "video_id": record.video_id,
        "fps": record.fps,
        "rgb_path": str(rgb_path),
        "flow_path": str(flow_path),
        "labels": sorted(record.video_labels),
    }
    if record.gt_segments is not None:
        row["segments"] = [[c, s, e] for c, s, e in record.gt_segments]
    return row


def write_dataset(dataset, ann_path, features_dir=None):
    """Persist features as WTALF1 files and the annotation JSON-lines file."""
    ann_path = Path(ann_path)
    root = Path(features_dir) if features_dir is not None else ann_path.parent
    lines = []
    for r in dataset:
        rgb_rel, flow_rel = f"{r.video_id}_rgb.wtal", f"{r.video_id}_flow.wtal"
        save_features(root / rgb_rel, r.rgb)
        save_features(root / flow_rel, r.flow)
        lines.append(json.dumps(annotation_row(r, rgb_rel, flow_rel)))
    atomic_write(ann_path, "\n".join(lines) + "\n")


# -- synthetic data ---------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    C: int = 3
    D: int = 16
    videos: int = 40
    T_range: tuple = (40, 80)
    snr: float = 4.0
    seed: int = 0
    fps: float = 25.0
    max_segments: int = 3
    edge_noise: float = 12.0
    min_segment: int = 8


def _fitting_segments(length, n_seg, min_segment):
    """Largest count <= n_seg whose shortest segments plus 1-step gaps fit."""
    while n_seg > 0 and n_seg * (max(min_segment, length // 12) + 1) - 1 > length:
        n_seg -= 1
    return n_seg


def _split_lengths(rng, length, n_seg, min_segment):
    """Segment lengths and background gaps (n_seg + 1 of them) filling ``length``."""
    lo = max(min_segment, length // 12)
    hi = max(lo, length // (n_seg + 2))
    seg = rng.integers(lo, hi + 1, size=n_seg)
    spare = length - seg.sum() - (n_seg - 1)  # interior gaps need at least one step
    cuts = np.sort(rng.integers(0, spare + 1, size=n_seg))
    gaps = np.diff(np.concatenate([[0], cuts, [spare]]))
    gaps[1:-1] += 1
    return seg, gaps


def synth_dataset(config=SynthConfig(), **overrides):
    """Random videos made of class prototypes plus isotropic noise.

    Each class (and background, index 0) owns a random direction of norm
    sqrt(D). A step's latent feature is its class prototype; the rgb and flow
    streams add independent zero-mean Gaussian noise of per-channel scale
    1/snr, so ``snr`` is the ratio of prototype norm to expected noise norm.
    Inside an action segment the noise scale grows quadratically from the
    center to ``edge_noise`` times that at the first and last steps, which
    makes segment boundaries the least discriminative steps.
    """
    if overrides:
        config = SynthConfig(**{**config.__dict__, **overrides})
    c_count, dim = config.C, config.D
    t_lo, t_hi = config.T_range
    if c_count < 1 or dim < 2 or not config.snr > 0 or config.videos < 1:
        raise InvalidArgument(f"invalid synthetic config {config}")
    if t_lo < 8 or t_hi < t_lo:
        raise InvalidArgument(f"T_range must satisfy 8 <= lo <= hi, got {config.T_range}")
    if config.min_segment < 1 or config.max_segments < 1 or config.edge_noise < 0:
        raise InvalidArgument(f"invalid segment settings in {config}")
    if _fitting_segments(t_lo, min(2, c_count), config.min_segment) < min(2, c_count):
        raise InvalidArgument(f"{min(2, c_count)} segments of >= {config.min_segment} steps "
                              f"do not fit in T = {t_lo}")

    rng = np.random.default_rng(config.seed)
    protos = rng.normal(size=(c_count + 1, dim))
    protos *= np.sqrt(dim) / np.linalg.norm(protos, axis=1, keepdims=True)
    sigma = 0.0 if np.isinf(config.snr) else 1.0 / config.snr
    step_s = SEGMENT_FRAMES / config.fps

    records = []
    for v in range(config.videos):
        length = int(rng.integers(t_lo, t_hi + 1))
        n_labels = 2 if c_count > 1 and rng.random() < 0.3 else 1
        labels = sorted(int(c) for c in rng.choice(np.arange(1, c_count + 1), n_labels, replace=False))
        n_seg = int(rng.integers(n_labels, max(n_labels, config.max_segments) + 1))
        n_seg = max(n_labels, _fitting_segments(length, n_seg, config.min_segment))
        seg_classes = labels + [int(c) for c in rng.choice(labels, n_seg - n_labels)]
        rng.shuffle(seg_classes)
        seg_lens, gaps = _split_lengths(rng, length, n_seg, config.min_segment)

        frame = np.zeros(length, dtype=int)
        scale = np.ones(length)
        segments = []
        t = int(gaps[0])
        for c, n, gap in zip(seg_classes, seg_lens, gaps[1:]):
            frame[t:t + n] = c
            # 0 at the segment center, 1 at its first/last step
            u = np.abs(np.arange(n) - (n - 1) / 2) / max((n - 1) / 2, 1)
            scale[t:t + n] = 1.0 + (config.edge_noise - 1.0) * u ** 2
            segments.append((int(c), float(t * step_s), float((t + n) * step_s)))
            t += int(n) + int(gap)

        latent = protos[frame].T  # (D, T)
        rgb = latent + sigma * scale * rng.normal(size=latent.shape)
        flow = latent + sigma * scale * rng.normal(size=latent.shape)
        records.append(VideoRecord(
            video_id=f"synth_{config.seed}_{v:04d}",
            rgb=rgb, flow=flow,
            video_labels=frozenset(labels),
            fps=config.fps,
            gt_segments=tuple(segments),
        ))
    return Dataset(c_count, tuple(records))
