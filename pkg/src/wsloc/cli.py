"""Command-line driver: synth | train-ilg | gen-labels | train-ptlr | infer | eval | pipeline.

All artifacts go under the output directory:

    data/annotations.jsonl, data/features/*.wtal   (synth)
    ilg.ckpt, ilg_trace.csv                         (train-ilg)
    labels/initial.jsonl, cas/ilg/*.wtal            (gen-labels)
    labels/stage{n}.jsonl, labels/stage{n}_ots.jsonl, labels/final.jsonl,
    ptlr/{ots,rts}_stage{n}.ckpt, ots.ckpt, rts.ckpt, ptlr_trace.csv,
    stage_metrics.json                              (train-ptlr)
    detections.jsonl, cas/ots/*.wtal, cas/rts/*.wtal (infer)
    report.json, report.txt                         (eval)
    manifest.json                                   (every command)

Exit codes: 0 success, 2 bad config / arguments / input files, 3 numeric failure.
"""

import argparse
import csv
import hashlib
import io
import json
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import config as cfg
from .data import SynthConfig, atomic_write, load_annotations, save_features, synth_dataset, write_dataset
from .errors import DegenerateLabels, FormatError, InvalidArgument, NumericFailure, UndefinedMetric
from .evaluate import DEFAULT_IOUS, load_ground_truth, map_table, pseudo_label_pr, write_report
from .ilg import IlgModel, generate_initial_labels, train_ilg
from .labels import dump_label_sets, load_label_sets
from .localize import localize_video, read_detections, write_detections
from .ptlr import OtsNet, RtsNet, ots_cas, rts_cas, run_ptlr

COMMANDS = ("synth", "train-ilg", "gen-labels", "train-ptlr", "infer", "eval", "pipeline")


class Run:
    """Resolved config, output directory and the artifacts written so far."""

    def __init__(self, config, stages=None, ann=None, features_dir=None, ious=None):
        self.config = config
        self.ious = tuple(ious) if ious else DEFAULT_IOUS
        self.out = Path(config.out)
        self.stages = config.ptlr.stages if stages is None else stages
        self.ann = ann or config.data.ann or None
        self.features_dir = features_dir or config.data.features_dir or None
        self.written = []
        self._dataset = None

    def path(self, *parts):
        return self.out.joinpath(*parts)

    def record(self, path):
        self.written.append(Path(path))
        return path

    def annotations(self):
        ann = self.path("data", "annotations.jsonl") if self.ann is None else Path(self.ann)
        if not ann.exists():
            raise InvalidArgument(f"annotation file {ann} not found; run `synth` or pass --ann")
        return ann

    def dataset(self):
        if self._dataset is None:
            synthetic = self.ann is None
            ann = self.annotations()
            features = self.features_dir
            if synthetic and features is None:
                features = self.path("data", "features")
            self._dataset = load_annotations(ann, features, self.config.data.synth_C if synthetic else None)
        return self._dataset


def _threads():
    raw = os.environ.get("WSLOC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise cfg.ConfigError(f"WSLOC_THREADS must be a positive integer, got {raw!r}")
    return n


def _per_video(fn, records):
    """``fn`` over records, in order, on at most WSLOC_THREADS workers."""
    n = _threads()
    if n == 1:
        return [fn(r) for r in records]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, records))


def _csv(rows):
    buf = io.StringIO()
    if rows:
        keys = list(dict.fromkeys(k for row in rows for k in row))
        writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(run, command):
    """Config snapshot, seed and the hash of every artifact written so far."""
    path = run.path("manifest.json")
    manifest = json.loads(path.read_text()) if path.exists() else {"artifacts": {}, "commands": []}
    manifest["config"] = cfg.dump(run.config)
    manifest["seed"] = run.config.seed
    manifest["commands"].append(command)
    for p in run.written:
        manifest["artifacts"][str(Path(p).relative_to(run.out))] = _sha256(p)
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- stages -----------------------------------------------------------------


def cmd_synth(run):
    ds = synth_dataset(SynthConfig(**run.config.synth_kwargs()))
    ann = run.path("data", "annotations.jsonl")
    features = run.path("data", "features")
    write_dataset(ds, ann, features)
    run.record(ann)
    for r in ds:
        run.record(features / f"{r.video_id}_rgb.wtal")
        run.record(features / f"{r.video_id}_flow.wtal")
    run._dataset = None  # later stages read the written files back
    return f"synth: {len(ds)} videos, C={ds.class_count}, D={ds.dim} -> {ann}"


def cmd_train_ilg(run):
    ds = run.dataset()
    model, trace = train_ilg(ds, run.config.ilg_config())
    model.save(run.record(run.path("ilg.ckpt")))
    atomic_write(run.record(run.path("ilg_trace.csv")), _csv(trace))
    return f"train-ilg: {len(trace)} iterations, final loss {trace[-1]['loss']:.4f}" if trace else \
        "train-ilg: 0 iterations"


def _has_gt(ds):
    return all(r.gt_segments is not None for r in ds)


def _label_pr(ds, label_sets):
    try:
        return pseudo_label_pr(label_sets, {r.video_id: r.frame_labels() for r in ds})
    except UndefinedMetric as exc:
        return None, exc.recall


def _write_cas(run, sub, cas_maps):
    for vid, cas in cas_maps.items():
        save_features(run.record(run.path("cas", sub, f"{vid}.wtal")), cas)


def cmd_gen_labels(run):
    ds = run.dataset()
    model = IlgModel.load(run.path("ilg.ckpt"))
    labels, cas_maps = generate_initial_labels(model, ds)
    dump_label_sets(run.record(run.path("labels", "initial.jsonl")), labels, stage=0)
    _write_cas(run, "ilg", cas_maps)
    selected = sum(len(ls) for ls in labels.values())
    msg = f"gen-labels: {selected} labeled steps over {len(ds)} videos"
    if _has_gt(ds):
        p, r = _label_pr(ds, labels)
        msg += f", recall {r:.3f}" + ("" if p is None else f", precision {p:.3f}")
    return msg


def cmd_train_ptlr(run):
    ds = run.dataset()
    initial = run.path("labels", "initial.jsonl")
    if not initial.exists():
        raise InvalidArgument(f"{initial} not found; run gen-labels first")
    labels = load_label_sets(initial)
    final = run.path("labels", "final.jsonl")
    metrics = []
    if _has_gt(ds):
        p, r = _label_pr(ds, labels)
        metrics.append({"stage": 0, "label_precision": p, "label_recall": r})

    def on_stage(stage, ots_labels, rts_labels, ots, rts):
        dump_label_sets(run.record(run.path("labels", f"stage{stage}_ots.jsonl")), ots_labels, stage)
        dump_label_sets(run.record(run.path("labels", f"stage{stage}.jsonl")), rts_labels, stage)
        ots.save(run.record(run.path("ptlr", f"ots_stage{stage}.ckpt")))
        rts.save(run.record(run.path("ptlr", f"rts_stage{stage}.ckpt")))
        if _has_gt(ds):
            p, r = _label_pr(ds, rts_labels)
            metrics.append({"stage": stage, "label_precision": p, "label_recall": r})

    result = run_ptlr(ds, labels, run.config.ptlr_config(run.stages), on_stage)
    if run.stages == 0:
        shutil.copyfile(initial, final)  # unchanged, byte for byte
        run.record(final)
    else:
        dump_label_sets(run.record(final), result.labels, run.stages)
    result.ots.save(run.record(run.path("ots.ckpt")))
    result.rts.save(run.record(run.path("rts.ckpt")))
    atomic_write(run.record(run.path("ptlr_trace.csv")), _csv(result.trace))
    atomic_write(run.record(run.path("stage_metrics.json")), json.dumps(metrics, indent=2) + "\n")
    msg = f"train-ptlr: {run.stages} stages"
    if metrics:
        msg += ", label recall " + " -> ".join(f"{m['label_recall']:.3f}" for m in metrics)
    return msg


def cmd_infer(run):
    ds = run.dataset()
    ots, rts = OtsNet.load(run.path("ots.ckpt")), RtsNet.load(run.path("rts.ckpt"))
    kw = run.config.infer_kwargs()

    def one(record):
        a, b = ots_cas(ots, record), rts_cas(rts, record)
        return a, b, localize_video(a, b, record.fps, record.video_id, **kw)

    results = _per_video(one, ds.records)
    detections = []
    for record, (a, b, dets) in zip(ds, results):
        _write_cas(run, "ots", {record.video_id: a})
        _write_cas(run, "rts", {record.video_id: b})
        detections += dets
    write_detections(run.record(run.path("detections.jsonl")), detections)
    return f"infer: {len(detections)} detections over {len(ds)} videos"


def cmd_eval(run, dets=None):
    dets = Path(dets) if dets else run.path("detections.jsonl")
    if not dets.exists():
        raise InvalidArgument(f"detection file {dets} not found")
    detections = read_detections(dets)
    gts = load_ground_truth(run.annotations())
    table = map_table(detections, gts, run.ious)
    metrics_path = run.path("stage_metrics.json")
    stage_metrics = json.loads(metrics_path.read_text()) if metrics_path.exists() else None
    write_report(run.record(run.path("report.json")), table, stage_metrics,
                 run.record(run.path("report.txt")))
    return "eval: " + " ".join(f"mAP@{k}={v:.4f}" for k, v in table.items())


def cmd_pipeline(run):
    lines = []
    if run.ann is None:
        lines.append(cmd_synth(run))
    for step in (cmd_train_ilg, cmd_gen_labels, cmd_train_ptlr, cmd_infer, cmd_eval):
        lines.append(step(run))
    return "\n".join(lines[:-1] + ["pipeline: " + lines[-1]])


# -- argument handling ------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="wsloc", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="run seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--ann", help="annotation JSON-lines file")
        p.add_argument("--features-dir", help="directory feature paths are relative to")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key; may repeat")
        if name in ("train-ptlr", "pipeline"):
            p.add_argument("--stages", type=int, help="number of refinement stages")
        if name in ("eval", "pipeline"):
            p.add_argument("--iou", type=float, action="append", help="IoU threshold; may repeat")
        if name == "eval":
            p.add_argument("--dets", help="detection JSON-lines file")
    return parser


def resolve_config(args):
    config = cfg.load(args.config) if args.config else cfg.RunConfig()
    pairs = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise cfg.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value.strip()
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.out is not None:
        pairs["out"] = args.out
    return cfg.from_pairs(pairs, config)


def dispatch(argv=None):
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        _threads()
        config = resolve_config(args)
        stages = getattr(args, "stages", None)
        if stages is not None and stages < 0:
            raise cfg.ConfigError("--stages must be non-negative")
        if stages is not None and stages > len(config.ptlr.schedule):
            raise cfg.ConfigError(f"--stages {stages} exceeds the {len(config.ptlr.schedule)}-entry schedule")
        ious = getattr(args, "iou", None)
        if ious and not all(0 < d <= 1 for d in ious):
            raise cfg.ConfigError(f"--iou values must lie in (0, 1], got {ious}")
        run = Run(config, stages, args.ann, args.features_dir, ious)
        command = args.command
        if command == "eval":
            summary = cmd_eval(run, args.dets)
        elif command == "pipeline":
            summary = cmd_pipeline(run)
        else:
            summary = {"synth": cmd_synth, "train-ilg": cmd_train_ilg, "gen-labels": cmd_gen_labels,
                       "train-ptlr": cmd_train_ptlr, "infer": cmd_infer}[command](run)
        write_manifest(run, command)
    except (NumericFailure, DegenerateLabels) as exc:
        print(f"wsloc {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (InvalidArgument, FormatError, UndefinedMetric, OSError, json.JSONDecodeError) as exc:
        print(f"wsloc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 0


def main():
    sys.exit(dispatch())

