"""Weakly supervised temporal action localization on a small numpy autodiff core."""

from .data import Dataset, SynthConfig, VideoRecord, fuse_streams, load_annotations, load_features, synth_dataset
from .errors import DegenerateLabels, FormatError, InvalidArgument, NumericFailure, UndefinedMetric
from .evaluate import GroundTruth, ground_truth, map_at_iou, map_table, pseudo_label_pr, temporal_iou
from .ilg import IlgConfig, IlgModel, generate_initial_labels, train_ilg
from .labels import PseudoLabelSet
from .localize import Detection, Proposal, localize_video, nms, oic_score
from .ptlr import OtsNet, PtlrConfig, RtsNet, run_ptlr

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "SynthConfig",
    "VideoRecord",
    "fuse_streams",
    "load_annotations",
    "load_features",
    "synth_dataset",
    "DegenerateLabels",
    "FormatError",
    "InvalidArgument",
    "NumericFailure",
    "UndefinedMetric",
    "GroundTruth",
    "ground_truth",
    "map_at_iou",
    "map_table",
    "pseudo_label_pr",
    "temporal_iou",
    "IlgConfig",
    "IlgModel",
    "generate_initial_labels",
    "train_ilg",
    "PseudoLabelSet",
    "Detection",
    "Proposal",
    "localize_video",
    "nms",
    "oic_score",
    "OtsNet",
    "PtlrConfig",
    "RtsNet",
    "run_ptlr",
]
