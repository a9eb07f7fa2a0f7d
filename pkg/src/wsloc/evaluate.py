"""Detection mAP at temporal IoU thresholds and pseudo-label precision/recall."""

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import atomic_write
from .errors import InvalidArgument, UndefinedMetric
from .labels import PseudoLabelSet

DEFAULT_IOUS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class GroundTruth:
    video_id: str
    cls: int
    t_start: float
    t_end: float


def temporal_iou(a, b):
    """IoU of two (start, end) intervals in seconds."""
    (a0, a1), (b0, b1) = a, b
    if not (a0 < a1 and b0 < b1):
        raise InvalidArgument(f"zero-length or reversed interval: {a}, {b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    return inter / (max(a1, b1) - min(a0, b0)) if inter > 0 else 0.0


@dataclass
class MatchResult:
    """Per class: ranked predictions, their TP flags and matched gt indices."""

    ranked: dict = field(default_factory=dict)
    tp: dict = field(default_factory=dict)
    matched: dict = field(default_factory=dict)
    n_gt: dict = field(default_factory=dict)


def match(preds, gts, iou_threshold):
    if not 0 < iou_threshold <= 1:
        raise InvalidArgument(f"IoU threshold must lie in (0, 1], got {iou_threshold}")
    gt_by_class = defaultdict(list)
    for g in gts:
        gt_by_class[g.cls].append(g)
    pred_by_class = defaultdict(list)
    for p in preds:
        pred_by_class[p.cls].append(p)

    result = MatchResult()
    for c, class_gts in gt_by_class.items():
        ranked = sorted(pred_by_class.get(c, []), key=lambda p: (-p.score, p.t_start))
        used = [False] * len(class_gts)
        tp, matched = [], []
        for p in ranked:
            best, best_iou = None, iou_threshold
            for j, g in enumerate(class_gts):
                if used[j] or g.video_id != p.video_id:
                    continue
                iou = temporal_iou((p.t_start, p.t_end), (g.t_start, g.t_end))
                if iou >= best_iou and (best is None or iou > best_iou):
                    best, best_iou = j, iou
            if best is not None:
                used[best] = True
            tp.append(best is not None)
            matched.append(best)
        result.ranked[c], result.tp[c], result.matched[c] = ranked, tp, matched
        result.n_gt[c] = len(class_gts)
    return result


def average_precision(tp_flags, n_gt):
    """Sum of precision at each true-positive rank, divided by the gt count."""
    hits = np.asarray(tp_flags, dtype=float)
    if hits.size == 0:
        return 0.0
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float((precision * hits).sum() / n_gt)


def map_at_iou(preds, gts, iou_threshold):
    """``(per-class AP dict, mAP)``; classes without ground truth are left out."""
    result = match(preds, gts, iou_threshold)
    if not result.n_gt:
        raise UndefinedMetric("no ground-truth instances for any class")
    ap = {c: average_precision(result.tp[c], result.n_gt[c]) for c in sorted(result.n_gt)}
    return ap, float(np.mean(list(ap.values())))


def pseudo_label_pr(label_sets, frame_gts):
    """Precision and recall of pseudo labels against per-step gt classes.

    Accepts one set and one gt array, or parallel sequences / mappings keyed by
    video id; counts are pooled over videos before dividing.
    """
    if isinstance(label_sets, PseudoLabelSet):
        pairs = [(label_sets, frame_gts)]
    elif isinstance(label_sets, dict):
        pairs = [(label_sets[k], frame_gts[k]) for k in label_sets]
    else:
        pairs = list(zip(label_sets, frame_gts))
    selected = correct = frames = 0
    for ls, gt in pairs:
        gt = np.asarray(gt)
        if len(ls) and ls.indices.max() >= gt.size:
            raise InvalidArgument(f"label index {ls.indices.max()} outside {gt.size} frames")
        selected += len(ls)
        correct += int((gt[ls.indices] == ls.classes).sum())
        frames += gt.size
    recall = correct / frames if frames else 0.0
    if selected == 0:
        err = UndefinedMetric("no frames selected; precision is undefined")
        err.recall = recall
        raise err
    return correct / selected, recall


def ground_truth(dataset):
    return [GroundTruth(r.video_id, c, s, e) for r in dataset for c, s, e in (r.gt_segments or ())]


def load_ground_truth(path):
    """Ground-truth segments straight from an annotation file; features are not read."""
    gts = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            if "segments" not in row or "video_id" not in row:
                raise InvalidArgument(f"{path}:{line_no}: no ground-truth segments to evaluate against")
            gts += [GroundTruth(str(row["video_id"]), int(c), float(s), float(e)) for c, s, e in row["segments"]]
    return gts


def map_table(detections, gts, ious=DEFAULT_IOUS):
    return {f"{d:.2f}": map_at_iou(detections, gts, d)[1] for d in ious}


def format_table(table, name="Ours"):
    """One row in the layout of a per-IoU mAP (%) comparison table."""
    head = "Method | " + " ".join(f"{float(k):.1f}" for k in table)
    row = f"{name} | " + " ".join(f"{100 * v:.1f}" for v in table.values())
    return head + "\n" + row + "\n"


def write_report(path, table, stage_metrics=None, text_path=None):
    report = {"map": table}
    if stage_metrics is not None:
        report["pseudo_labels"] = stage_metrics
    atomic_write(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    if text_path is not None:
        atomic_write(text_path, format_table(table))
    return report
