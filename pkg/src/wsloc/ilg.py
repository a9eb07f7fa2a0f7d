"""Initial label generation: two per-stream backbones trained with
cross-stream and temporal multi-resolution consistency, then thresholded
into frame-level pseudo labels."""

from dataclasses import dataclass

import numpy as np

from .basnet import LAMBDA_NORM, BasNet
from .data import BACKGROUND
from .diffcore import Adam, Tape, Tensor, l1_distance, resize_linear, scaled_length
from .errors import InvalidArgument, NumericFailure
from .labels import PseudoLabelSet, from_selection
from .layers import assign_params, read_checkpoint, save_checkpoint

RGB_WEIGHT = 1.0
FLOW_WEIGHT = 1.5
HIGH_THRESHOLD = 0.7
LOW_THRESHOLD = 0.1


@dataclass(frozen=True)
class IlgConfig:
    lr: float = 1e-4
    iterations: int = 1500
    alpha: float = 0.5  # cross-stream
    beta: float = 0.5  # rgb multi-resolution
    gamma: float = 0.5  # flow multi-resolution
    s_range: tuple = (0.5, 2.0)
    hidden: int = 256
    lambda_norm: float = LAMBDA_NORM
    seed: int = 0


class IlgModel:
    """Two backbones with disjoint parameters, one per stream."""

    def __init__(self, in_dim, num_classes, hidden=256, seed=0):
        rng = np.random.default_rng(seed)
        self.rgb = BasNet(in_dim, num_classes, hidden, rng, name="rgb")
        self.flow = BasNet(in_dim, num_classes, hidden, rng, name="flow")

    @property
    def num_classes(self):
        return self.rgb.num_classes

    def params(self):
        return self.rgb.params() + self.flow.params()

    def config(self):
        return {"kind": "ilg", **self.rgb.config()}

    def save(self, path):
        save_checkpoint(path, self.params(), self.config())

    @classmethod
    def load(cls, path):
        config, arrays = read_checkpoint(path)
        if config.get("kind") != "ilg":
            raise InvalidArgument(f"{path} is not an ILG checkpoint")
        model = cls(config["in_dim"], config["num_classes"], config["hidden"])
        assign_params(model.params(), arrays)
        return model

    def stream_cas(self, record):
        """Suppression-branch CAS of each stream as numpy arrays."""
        return (self.rgb.suppressed_cas(Tensor(record.rgb)).numpy(),
                self.flow.suppressed_cas(Tensor(record.flow)).numpy())

    def cas(self, record):
        return fuse_cas(*self.stream_cas(record))


def csc_loss(cas_rgb, cas_flow):
    """Cross-stream consistency: mean absolute difference of the two CASs."""
    if cas_rgb.shape != cas_flow.shape:
        raise InvalidArgument(f"CAS shapes differ: {cas_rgb.shape} vs {cas_flow.shape}")
    return l1_distance(cas_rgb, cas_flow)


def sc_loss(cas, cas_hat, s):
    """Multi-resolution consistency between the rescaled CAS and the CAS of
    rescaled features."""
    expected = scaled_length(cas.shape[-1], s)
    if cas_hat.shape[-1] != expected:
        raise InvalidArgument(f"transformed CAS has length {cas_hat.shape[-1]}, expected {expected}")
    return l1_distance(resize_linear(cas, s), cas_hat)


def ilg_total_loss(record, model, s, config=IlgConfig()):
    """Joint objective for one video; returns ``(loss, parts)``.

    Consistency terms whose weight is zero are skipped entirely.
    """
    parts = {}
    cas = {}
    total = 0.0
    for stream, net, feats, weight in (
        ("rgb", model.rgb, record.rgb, config.beta),
        ("flow", model.flow, record.flow, config.gamma),
    ):
        feats = Tensor(feats)
        out = net.forward(feats)
        bas = net.loss(feats, record.video_labels, out, config.lambda_norm)
        parts[f"bas_{stream}"] = bas
        total = total + bas
        cas[stream] = out.cas()
        if weight:
            cas_hat = net.suppressed_cas(resize_linear(feats, s))
            parts[f"sc_{stream}"] = sc_loss(cas[stream], cas_hat, s)
            total = total + weight * parts[f"sc_{stream}"]
    if config.alpha:
        parts["csc"] = csc_loss(cas["rgb"], cas["flow"])
        total = total + config.alpha * parts["csc"]
    return total, parts


def train_ilg(dataset, config=IlgConfig(), model=None):
    """Train both streams; returns ``(model, trace)``.

    ``trace`` holds one dict per iteration with the video index, the scale
    factor and every loss term.
    """
    if len(dataset) == 0:
        raise InvalidArgument("cannot train on an empty dataset")
    if model is None:
        model = IlgModel(dataset.dim, dataset.class_count, config.hidden, config.seed)
    opt = Adam(model.params(), config.lr)
    rng = np.random.default_rng([config.seed, 1])
    lo, hi = config.s_range
    trace = []
    for it in range(config.iterations):
        v = int(rng.integers(len(dataset)))
        s = float(rng.uniform(lo, hi))
        with Tape() as tape:
            loss, parts = ilg_total_loss(dataset.records[v], model, s, config)
        if not np.isfinite(loss.data):
            raise NumericFailure(f"ILG loss is not finite at iteration {it}")
        opt.zero_grad()
        tape.backward(loss)
        try:
            opt.step()
        except NumericFailure as exc:
            raise NumericFailure(f"iteration {it}: {exc}") from None
        trace.append({"iteration": it, "video": v, "s": s, "loss": loss.item(),
                      **{k: t.item() for k, t in parts.items()}})
    return model, trace


def fuse_cas(cas_rgb, cas_flow):
    """Weighted average of the stream CASs, flow weighted 1.5 to rgb's 1."""
    cas_rgb = np.asarray(cas_rgb)
    cas_flow = np.asarray(cas_flow)
    if cas_rgb.shape != cas_flow.shape:
        raise InvalidArgument(f"CAS shapes differ: {cas_rgb.shape} vs {cas_flow.shape}")
    return (RGB_WEIGHT * cas_rgb + FLOW_WEIGHT * cas_flow) / (RGB_WEIGHT + FLOW_WEIGHT)


def initial_labels(cas, video_labels, high=HIGH_THRESHOLD, low=LOW_THRESHOLD):
    """Threshold a fused CAS into pseudo labels.

    A step whose best allowed action score exceeds ``high`` takes that class;
    otherwise a step whose summed action score is below ``low`` is background;
    anything else is left out.
    """
    cas = np.asarray(cas)
    allowed = np.array(sorted(video_labels), dtype=int)
    scores = cas[allowed]
    best = allowed[np.argmax(scores, axis=0)]  # argmax keeps the lowest class on ties
    fg = scores.max(axis=0) > high
    bg = ~fg & (cas[1:].sum(axis=0) < low)
    classes = np.where(fg, best, BACKGROUND)
    return from_selection(fg | bg, classes)


def generate_initial_labels(model, dataset, high=HIGH_THRESHOLD, low=LOW_THRESHOLD):
    """``{video_id: PseudoLabelSet}`` plus the fused CAS of every video."""
    label_sets, cas_maps = {}, {}
    for record in dataset:
        cas = model.cas(record)
        cas_maps[record.video_id] = cas
        label_sets[record.video_id] = initial_labels(cas, record.video_labels, high, low)
    return label_sets, cas_maps


__all__ = [
    "IlgConfig", "IlgModel", "PseudoLabelSet", "csc_loss", "sc_loss", "ilg_total_loss",
    "train_ilg", "fuse_cas", "initial_labels", "generate_initial_labels",
]
