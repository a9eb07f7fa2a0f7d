"""Background-suppression CAS generator used per stream in the first stage.

A filtering module predicts per-step foreground weights; one classifier is
run twice, on the raw features (base branch) and on the weight-scaled
features (suppression branch), and each branch's logits are pooled into
video-level scores with a top-k mean.
"""

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, bce, mean, sigmoid, softmax, topk_mean
from .errors import InvalidArgument, NumericFailure
from .layers import Conv, conv_stack

LAMBDA_NORM = 1e-4


def topk_count(length):
    return max(1, length // 8)


def label_vectors(video_labels, num_classes):
    """Base and suppression video-level targets (index 0 is background)."""
    y = np.zeros(num_classes + 1)
    for c in video_labels:
        if not 1 <= c <= num_classes:
            raise InvalidArgument(f"class id {c} outside 1..{num_classes}")
        y[c] = 1.0
    if not y.any():
        raise InvalidArgument("video needs at least one foreground label")
    y_base, y_supp = y.copy(), y
    y_base[0] = 1.0
    return y_base, y_supp


def video_score(logits, k):
    """Top-k mean over time per class, then softmax across classes."""
    return softmax(topk_mean(logits, k), axis=0)


def cas_probabilities(logits):
    return softmax(logits, axis=0)


def gated_cas(logits, weights):
    """Per-step class probabilities with foreground mass scaled by ``weights``.

    The mass removed from the action classes moves to background (row 0),
    so a suppressed step reads as background and columns still sum to 1.
    """
    probs = cas_probabilities(logits)
    background = np.zeros((probs.shape[0], 1))
    background[0] = 1.0
    return probs * weights + background * (1.0 - weights)


def basnet_loss(p_base, p_supp, y_video, w, lambda_norm=LAMBDA_NORM):
    """Base BCE + suppression BCE + lambda * mean |w|.

    ``y_video`` is the set of foreground class ids, or a ready
    ``(y_base, y_supp)`` pair.
    """
    if isinstance(y_video, tuple):
        y_base, y_supp = y_video
    else:
        y_base, y_supp = label_vectors(y_video, p_base.shape[0] - 1)
    for t in (p_base, p_supp, w):
        if not np.isfinite(t.data).all():
            raise NumericFailure("non-finite input to basnet_loss")
    # w comes out of a sigmoid, so |w| == w
    return bce(p_base, y_base) + bce(p_supp, y_supp) + lambda_norm * mean(w)


@dataclass
class BasNetOutput:
    weights: Tensor  # (1, T) foreground weights
    base_logits: Tensor
    supp_logits: Tensor

    def cas(self):
        """Suppression-branch CAS, gated by the foreground weights."""
        return gated_cas(self.supp_logits, self.weights)


class BasNet:
    def __init__(self, in_dim, num_classes, hidden=256, rng=None, name="basnet"):
        rng = np.random.default_rng(rng)
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.name = name
        self.filtering = [
            Conv.init(rng, in_dim, hidden, 3, name=f"{name}.filter.0"),
            Conv.init(rng, hidden, hidden, 3, name=f"{name}.filter.1"),
            Conv.init(rng, hidden, 1, 1, name=f"{name}.filter.2"),
        ]
        self.classifier = [
            Conv.init(rng, in_dim, hidden, 3, name=f"{name}.cls.0"),
            Conv.init(rng, hidden, hidden, 3, name=f"{name}.cls.1"),
            Conv.init(rng, hidden, num_classes + 1, 1, name=f"{name}.cls.2"),
        ]

    def params(self):
        return [p for layer in self.filtering + self.classifier for p in layer.params()]

    def config(self):
        return {"in_dim": self.in_dim, "num_classes": self.num_classes, "hidden": self.hidden,
                "k_rule": "max(1, T // 8)"}

    def _check(self, features):
        features = as_tensor(features)
        if features.data.ndim != 2 or features.shape[0] != self.in_dim:
            raise InvalidArgument(f"{self.name}: expected ({self.in_dim}, T) features, got {features.shape}")
        return features

    def filtering_forward(self, features):
        """Foreground weights in (0, 1), shape (1, T)."""
        return sigmoid(conv_stack(self._check(features), self.filtering))

    def branch_forward(self, features):
        """Classifier logits, shape (C+1, T). Both branches go through here."""
        return conv_stack(self._check(features), self.classifier)

    def forward(self, features):
        features = self._check(features)
        w = self.filtering_forward(features)
        return BasNetOutput(w, self.branch_forward(features), self.branch_forward(features * w))

    def suppressed_cas(self, features):
        features = self._check(features)
        w = self.filtering_forward(features)
        return gated_cas(self.branch_forward(features * w), w)

    def loss(self, features, video_labels, out=None, lambda_norm=LAMBDA_NORM):
        out = out or self.forward(features)
        k = topk_count(out.base_logits.shape[1])
        return basnet_loss(
            video_score(out.base_logits, k),
            video_score(out.supp_logits, k),
            label_vectors(video_labels, self.num_classes),
            out.weights,
            lambda_norm,
        )
