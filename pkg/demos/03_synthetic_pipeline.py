# coding: utf-8

# # The whole pipeline on synthetic videos
#
# A small run of every stage, in process: generate videos, train the two
# stream label generator, refine labels for a few stages, localize and
# score. Runs in well under a minute; the acceptance benchmark is the same
# code at a larger size.

import time

from wsloc.data import SynthConfig, synth_dataset
from wsloc.evaluate import format_table, ground_truth, map_table, pseudo_label_pr
from wsloc.ilg import IlgConfig, generate_initial_labels, train_ilg
from wsloc.localize import localize_video
from wsloc.ptlr import PtlrConfig, ots_cas, rts_cas, run_ptlr

start = time.time()

# ## Data
#
# Each class owns a random prototype feature; steps inside an action sit on
# their class prototype plus noise, background steps on the background one.
# Noise grows toward segment edges, so boundaries are the hard part.

ds = synth_dataset(SynthConfig(C=3, D=16, videos=16, T_range=(40, 80), snr=4, seed=7))
gt = {r.video_id: r.frame_labels() for r in ds}
r = ds.records[0]
print(f"{len(ds)} videos; first has {r.length} steps, labels {sorted(r.video_labels)}")
print("its segments (class, start s, end s):", r.gt_segments)

# ## Initial labels
#
# Only video-level labels are used for training from here on.

model, trace = train_ilg(ds, IlgConfig(hidden=32, iterations=800, lr=3e-4, seed=0))
print(f"ILG loss {trace[0]['loss']:.3f} -> {trace[-1]['loss']:.3f}")
initial, _ = generate_initial_labels(model, ds)
p, rc = pseudo_label_pr(initial, gt)
print(f"initial labels: precision {p:.3f}, recall {rc:.3f}")

# ## Refinement
#
# Two networks take turns: each trains on the other's latest labels, and
# the threshold for keeping a label drops every stage.

result = run_ptlr(ds, initial, PtlrConfig(hidden=32, iterations=200, seed=0))
for h, theta in zip(result.history, PtlrConfig().schedule):
    p, rc = pseudo_label_pr(h["rts"], gt)
    print(f"stage {h['stage']} (threshold {theta}): precision {p:.3f}, recall {rc:.3f}")

# ## Localization and mAP

dets = []
for r in ds:
    dets += localize_video(ots_cas(result.ots, r), rts_cas(result.rts, r), r.fps, r.video_id)
print(format_table(map_table(dets, ground_truth(ds)), name="synthetic"))
print(f"done in {time.time() - start:.0f}s")
