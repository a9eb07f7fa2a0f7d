"""Progressive temporal label refinement.

An original-resolution network (OTS) and a multi-branch reduced-resolution
network (RTS) are trained in turn on frame-level pseudo labels; each one's
CAS is thresholded into the labels the other trains on next.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import BACKGROUND
from .diffcore import Adam, Tape, Tensor, gather, log_prob, mean, relu, softmax, upsample_nearest
from .errors import DegenerateLabels, InvalidArgument
from .labels import PseudoLabelSet, from_selection
from .layers import Conv, assign_params, conv_stack, read_checkpoint, save_checkpoint

THETA_SCHEDULE = (0.7, 0.65, 0.6, 0.55)


@dataclass(frozen=True)
class PtlrConfig:
    branches: int = 3
    stages: int = 3
    schedule: tuple = THETA_SCHEDULE
    lr: float = 1e-3
    iterations: int = 300  # optimizer steps per network per stage
    hidden: int = 256
    cold_start: bool = False
    seed: int = 0


@dataclass(frozen=True)
class StageConfig:
    stage: int
    theta: float
    lr: float
    iterations: int


def stage_configs(config):
    if len(config.schedule) < config.stages:
        raise InvalidArgument(f"threshold schedule has {len(config.schedule)} entries for {config.stages} stages")
    return [StageConfig(n + 1, float(config.schedule[n]), config.lr, config.iterations)
            for n in range(config.stages)]


class _Net:
    kind = None

    def config(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "num_classes": self.num_classes,
                "hidden": self.hidden, **self._extra_config()}

    def _extra_config(self):
        return {}

    def save(self, path):
        save_checkpoint(path, self.params(), self.config())

    @classmethod
    def load(cls, path):
        config, arrays = read_checkpoint(path)
        if config.get("kind") != cls.kind:
            raise InvalidArgument(f"{path} is not a {cls.kind} checkpoint")
        extra = {k: v for k, v in config.items() if k not in ("kind", "in_dim", "num_classes", "hidden")}
        net = cls(config["in_dim"], config["num_classes"], config["hidden"], **extra)
        assign_params(net.params(), arrays)
        return net

    def _check(self, features):
        features = features if isinstance(features, Tensor) else Tensor(features)
        if features.data.ndim != 2 or features.shape[0] != self.in_dim:
            raise InvalidArgument(f"{self.kind}: expected ({self.in_dim}, T) features, got {features.shape}")
        return features


class OtsNet(_Net):
    """Two kernel-3 convs with ReLU, then a kernel-1 conv to C+1 classes."""

    kind = "ots"

    def __init__(self, in_dim, num_classes, hidden=256, rng=None):
        rng = np.random.default_rng(rng)
        self.in_dim, self.num_classes, self.hidden = in_dim, num_classes, hidden
        self.layers = [
            Conv.init(rng, in_dim, hidden, 3, name="ots.0"),
            Conv.init(rng, hidden, hidden, 3, name="ots.1"),
            Conv.init(rng, hidden, num_classes + 1, 1, name="ots.2"),
        ]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, features):
        """CAS of per-step class probabilities, shape (C+1, T)."""
        return softmax(conv_stack(self._check(features), self.layers), axis=0)


class RtsNet(_Net):
    """Shared kernel-3 stem; branch m halves the time axis m times with
    stride-2 convs before its own kernel-1 class head."""

    kind = "rts"

    def __init__(self, in_dim, num_classes, hidden=256, rng=None, branches=3):
        if branches < 1:
            raise InvalidArgument("RTS needs at least one branch")
        rng = np.random.default_rng(rng)
        self.in_dim, self.num_classes, self.hidden = in_dim, num_classes, hidden
        self.branches = branches
        self.stem = Conv.init(rng, in_dim, hidden, 3, name="rts.stem")
        self.down = []
        self.heads = []
        for m in range(1, branches + 1):
            self.down.append([Conv.init(rng, hidden, hidden, 3, stride=2, padding=1, name=f"rts.b{m}.down{j}")
                              for j in range(m)])
            self.heads.append(Conv.init(rng, hidden, num_classes + 1, 1, name=f"rts.b{m}.head"))

    def _extra_config(self):
        return {"branches": self.branches}

    def params(self):
        layers = [self.stem] + [c for convs in self.down for c in convs] + self.heads
        return [p for layer in layers for p in layer.params()]

    def branch_cas(self, features):
        """Low-resolution CAS per branch; branch m has ceil(T / 2**m) steps."""
        x = relu(self.stem(self._check(features)))
        out = []
        for convs, head in zip(self.down, self.heads):
            h = x
            for conv in convs:
                h = relu(conv(h))
            out.append(softmax(head(h), axis=0))
        return out

    def forward(self, features):
        """``(branch CASs, combined original-resolution CAS)``."""
        length = self._check(features).shape[1]
        low = self.branch_cas(features)
        return low, combine_branches(low, length)


def combine_branches(low_res, length):
    """Mean over branches of nearest-neighbour upsampling back to ``length``."""
    ups = [upsample_nearest(a, 2 ** m, length) for m, a in enumerate(low_res, 1)]
    combined = ups[0]
    for u in ups[1:]:
        combined = combined + u
    return combined if len(ups) == 1 else combined / len(ups)


def supervised_cas_loss(cas, indices, classes):
    """Mean negative log-probability of each labeled step's class."""
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        raise InvalidArgument("no labeled steps to supervise on")
    if indices.max() >= cas.shape[1]:
        raise InvalidArgument(f"label index {indices.max()} outside CAS of length {cas.shape[1]}")
    return -mean(log_prob(gather(cas, classes, indices)))


def map_indices(label_set, m, length_m):
    """Labels for a branch at scale 2**m: low-res step t inherits original step t * 2**m."""
    factor = 2 ** m
    pos = {int(i): int(c) for i, c in zip(label_set.indices, label_set.classes)}
    kept = [t for t in range(length_m) if t * factor in pos]
    return PseudoLabelSet(np.array(kept, dtype=int), np.array([pos[t * factor] for t in kept], dtype=int))


def rts_loss(low_res, label_set):
    """Average over branches of each branch's loss on its mapped labels.

    Branches whose mapped set is empty are skipped; returns None when every
    branch is starved.
    """
    terms = []
    for m, cas in enumerate(low_res, 1):
        mapped = map_indices(label_set, m, cas.shape[1])
        if len(mapped):
            terms.append(supervised_cas_loss(cas, mapped.indices, mapped.classes))
    if not terms:
        return None
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss / len(terms)


def labels_from_cas(cas, theta, video_labels):
    """Inclusive threshold: an allowed action class at or above ``theta``
    wins; otherwise background at or above ``theta``; otherwise unlabeled."""
    cas = np.asarray(cas)
    allowed = np.array(sorted(video_labels), dtype=int)
    scores = cas[allowed]
    best = allowed[np.argmax(scores, axis=0)]
    fg = scores.max(axis=0) >= theta
    bg = ~fg & (cas[BACKGROUND] >= theta)
    return from_selection(fg | bg, np.where(fg, best, BACKGROUND))


def _train(net, loss_fn, dataset, label_sets, stage, rng):
    trainable = [i for i, r in enumerate(dataset.records) if len(label_sets[r.video_id])]
    if not trainable:
        raise DegenerateLabels(None, stage.stage)
    opt = Adam(net.params(), stage.lr)
    trace = []
    for it in range(stage.iterations):
        v = trainable[int(rng.integers(len(trainable)))]
        record = dataset.records[v]
        with Tape() as tape:
            loss = loss_fn(net, Tensor(record.fused()), label_sets[record.video_id])
        if loss is None:
            continue
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        trace.append({"stage": stage.stage, "net": net.kind, "iteration": it, "video": v, "loss": loss.item()})
    return trace


def _ots_loss(net, features, ls):
    return supervised_cas_loss(net.forward(features), ls.indices, ls.classes)


def _rts_loss(net, features, ls):
    return rts_loss(net.branch_cas(features), ls)


def ots_cas(net, record):
    return net.forward(record.fused()).numpy()


def rts_cas(net, record):
    return net.forward(record.fused())[1].numpy()


def relabel(dataset, cas_fn, theta, stage):
    out = {}
    for record in dataset:
        ls = labels_from_cas(cas_fn(record), theta, record.video_labels)
        if not len(ls):
            raise DegenerateLabels(record.video_id, stage)
        out[record.video_id] = ls
    return out


@dataclass
class PtlrResult:
    labels: dict
    ots: OtsNet
    rts: RtsNet
    history: list = field(default_factory=list)  # per stage: {"stage", "ots": labels, "rts": labels}
    trace: list = field(default_factory=list)


def run_ptlr(dataset, initial_labels, config=PtlrConfig(), on_stage=None):
    """Alternate OTS and RTS training for ``config.stages`` stages.

    ``on_stage(stage, ots_labels, rts_labels, ots, rts)`` is called after each
    stage (for persisting artifacts or metrics).
    """
    in_dim, num_classes = 2 * dataset.dim, dataset.class_count
    rng = np.random.default_rng([config.seed, 2])

    def fresh(stage_no):
        init = np.random.default_rng([config.seed, 3, stage_no if config.cold_start else 0])
        return (OtsNet(in_dim, num_classes, config.hidden, init),
                RtsNet(in_dim, num_classes, config.hidden, init, config.branches))

    ots, rts = fresh(1)
    labels = dict(initial_labels)
    missing = [r.video_id for r in dataset if r.video_id not in labels]
    if missing:
        raise InvalidArgument(f"no initial labels for videos {missing[:5]}")
    result = PtlrResult(labels, ots, rts)
    for stage in stage_configs(config):
        if config.cold_start and stage.stage > 1:
            ots, rts = fresh(stage.stage)
        result.trace += _train(ots, _ots_loss, dataset, labels, stage, rng)
        ots_labels = relabel(dataset, lambda r: ots_cas(ots, r), stage.theta, stage.stage)
        result.trace += _train(rts, _rts_loss, dataset, ots_labels, stage, rng)
        labels = relabel(dataset, lambda r: rts_cas(rts, r), stage.theta, stage.stage)
        result.history.append({"stage": stage.stage, "ots": ots_labels, "rts": labels})
        if on_stage is not None:
            on_stage(stage.stage, ots_labels, labels, ots, rts)
    result.labels, result.ots, result.rts = labels, ots, rts
    return result
