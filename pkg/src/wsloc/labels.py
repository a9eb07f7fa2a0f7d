"""Frame-level pseudo label sets and their JSON-lines form."""

import json
from dataclasses import dataclass

import numpy as np

from .data import BACKGROUND, atomic_write
from .errors import InvalidArgument


@dataclass(frozen=True, eq=False)
class PseudoLabelSet:
    """Selected step indices with one class id each (0 = background).

    The one-hot label of ``indices[i]`` has its bit at ``classes[i]``.
    """

    indices: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int).reshape(-1)
        cls = np.asarray(self.classes, dtype=int).reshape(-1)
        if idx.shape != cls.shape:
            raise InvalidArgument("indices and classes differ in length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            raise InvalidArgument("indices must be sorted, unique and non-negative")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "classes", cls)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=int), np.zeros(0, dtype=int))

    def __len__(self):
        return self.indices.size

    def __eq__(self, other):
        return (isinstance(other, PseudoLabelSet)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.classes, other.classes))

    def one_hot(self, num_classes):
        out = np.zeros((len(self), num_classes + 1))
        out[np.arange(len(self)), self.classes] = 1.0
        return out

    def as_dict(self):
        return dict(zip(self.indices.tolist(), self.classes.tolist()))

    def foreground(self):
        return self.classes != BACKGROUND


def from_selection(selected, classes):
    """Build a set from a boolean step mask and a per-step class array."""
    idx = np.flatnonzero(selected)
    return PseudoLabelSet(idx, np.asarray(classes)[idx])


def dump_label_sets(path, label_sets, stage=None):
    """Write ``{video_id: PseudoLabelSet}`` as JSON-lines."""
    lines = []
    for vid, ls in label_sets.items():
        row = {"video_id": vid, "indices": ls.indices.tolist(), "classes": ls.classes.tolist()}
        if stage is not None:
            row["stage"] = stage
        lines.append(json.dumps(row))
    atomic_write(path, "".join(line + "\n" for line in lines))


def load_label_sets(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row["video_id"]] = PseudoLabelSet(row["indices"], row["classes"])
    return out
