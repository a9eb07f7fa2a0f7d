"""Turn CASs into scored temporal proposals: threshold sweep, run grouping,
inner-outer contrast scoring, pooling of both networks and class-wise NMS."""

import json
from dataclasses import dataclass

import numpy as np

from .data import SEGMENT_FRAMES, atomic_write
from .errors import InvalidArgument

SWEEP_STEP = 0.025
SWEEP_MAX = 0.5
NMS_THRESHOLD = 0.7
INFLATION = 0.25


@dataclass(frozen=True)
class Proposal:
    cls: int
    start: int  # inclusive step index
    end: int  # inclusive step index
    confidence: float = 0.0
    source: str = ""

    def __post_init__(self):
        if self.start > self.end or self.start < 0:
            raise InvalidArgument(f"bad proposal interval [{self.start}, {self.end}]")
        if self.cls < 1:
            raise InvalidArgument(f"proposal class must be a foreground class, got {self.cls}")

    @property
    def length(self):
        return self.end - self.start + 1


@dataclass(frozen=True)
class Detection:
    video_id: str
    cls: int
    t_start: float
    t_end: float
    score: float

    def to_json(self):
        return {"video_id": self.video_id, "class": self.cls, "t_start_s": self.t_start,
                "t_end_s": self.t_end, "score": self.score}

    @classmethod
    def from_json(cls, row):
        return cls(str(row["video_id"]), int(row["class"]), float(row["t_start_s"]),
                   float(row["t_end_s"]), float(row["score"]))


def _runs(mask):
    """(start, end) inclusive bounds of every maximal run of True."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2].tolist(), (edges[1::2] - 1).tolist()))


def proposals_from_cas(cas, theta, source=""):
    """Maximal runs of steps scoring above ``theta``, per action class."""
    if not 0 <= theta < 1:
        raise InvalidArgument(f"threshold must lie in [0, 1), got {theta}")
    cas = np.asarray(cas)
    return [Proposal(c, s, e, 0.0, source)
            for c in range(1, cas.shape[0])
            for s, e in _runs(cas[c] > theta)]


def sweep_thresholds_values(step=SWEEP_STEP, upper=SWEEP_MAX):
    n = int(round(upper / step))
    return np.linspace(0.0, n * step, n + 1)


def sweep_thresholds(cas, source="", step=SWEEP_STEP, upper=SWEEP_MAX):
    out = []
    for theta in sweep_thresholds_values(step, upper):
        out.extend(proposals_from_cas(cas, theta, source))
    return out


def _half_up(x):
    return int(np.floor(x + 0.5))


def oic_score(cas, proposal, inflation=INFLATION):
    """Inner mean minus the mean over both inflated flanks (clipped to the
    video); a proposal with no flank inside the video scores its inner mean."""
    if inflation < 0:
        raise InvalidArgument("inflation must be non-negative")
    row = np.asarray(cas)[proposal.cls]
    inner = row[proposal.start:proposal.end + 1].mean()
    flank = max(1, _half_up(inflation * proposal.length))
    left = row[max(0, proposal.start - flank):proposal.start]
    right = row[proposal.end + 1:proposal.end + 1 + flank]
    outer = np.concatenate([left, right])
    return float(inner - (outer.mean() if outer.size else 0.0))


def step_iou(a, b):
    """IoU of inclusive step intervals, treating step t as [t, t + 1)."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def nms(proposals, threshold=NMS_THRESHOLD):
    """Greedy class-wise suppression, highest confidence first (ties: earlier start)."""
    if not 0 < threshold <= 1:
        raise InvalidArgument(f"NMS threshold must lie in (0, 1], got {threshold}")
    ranked = sorted(proposals, key=lambda p: (-p.confidence, p.start))
    kept = []
    for p in ranked:
        if all(q.cls != p.cls or step_iou(p, q) < threshold for q in kept):
            kept.append(p)
    return kept


def score_proposals(cas, source, inflation=INFLATION, step=SWEEP_STEP, upper=SWEEP_MAX):
    """Sweep, deduplicate identical intervals and attach contrast scores."""
    unique = {}
    for p in sweep_thresholds(cas, source, step, upper):
        unique.setdefault((p.cls, p.start, p.end), p)
    return [Proposal(p.cls, p.start, p.end, oic_score(cas, p, inflation), source)
            for p in unique.values()]


def localize_proposals(ots_cas, rts_cas, nms_threshold=NMS_THRESHOLD, inflation=INFLATION,
                       step=SWEEP_STEP, upper=SWEEP_MAX):
    ots_cas, rts_cas = np.asarray(ots_cas), np.asarray(rts_cas)
    if ots_cas.shape != rts_cas.shape:
        raise InvalidArgument(f"CAS shapes differ: {ots_cas.shape} vs {rts_cas.shape}")
    pooled = {}
    for cas, source in ((ots_cas, "OTS"), (rts_cas, "RTS")):
        for p in score_proposals(cas, source, inflation, step, upper):
            key = (p.cls, p.start, p.end)
            if key not in pooled or p.confidence > pooled[key].confidence:
                pooled[key] = p
    # stable order before NMS so ties resolve the same way every run
    ordered = sorted(pooled.values(), key=lambda p: (p.cls, p.start, p.end))
    return nms(ordered, nms_threshold)


def localize_video(ots_cas, rts_cas, fps, video_id="", **kw):
    """Final detections in seconds for one video."""
    step_s = SEGMENT_FRAMES / fps
    return [Detection(video_id, p.cls, p.start * step_s, (p.end + 1) * step_s, p.confidence)
            for p in localize_proposals(ots_cas, rts_cas, **kw)]


def write_detections(path, detections):
    atomic_write(path, "".join(json.dumps(d.to_json()) + "\n" for d in detections))


def read_detections(path):
    with open(path) as fh:
        return [Detection.from_json(json.loads(line)) for line in fh if line.strip()]
