# coding: utf-8

# # From class activations to labels and proposals
#
# A class activation sequence (CAS) is a (C+1) x T array of per-step class
# probabilities, row 0 being background. This walk-through turns toy CASs
# into pseudo labels, then into scored and suppressed proposals.

import numpy as np

from wsloc.diffcore import Tensor
from wsloc.ilg import fuse_cas, initial_labels
from wsloc.localize import Proposal, localize_video, nms, oic_score, proposals_from_cas
from wsloc.ptlr import combine_branches, labels_from_cas, map_indices


def one_class(row):
    row = np.asarray(row, dtype=float)
    return np.stack([1 - row, row])


# ## Labels at two resolutions
#
# The original-resolution network scores eight steps; the reduced one scores
# four, which are copied back up to eight before thresholding. Scores at or
# above the threshold become labels.

ots_row = [0.7, 0.6, 0.6, 0.5, 0.7, 0.5, 0.8, 0.7]
rts_low = [0.7, 0.6, 0.7, 0.8]

ots = labels_from_cas(one_class(ots_row), 0.7, {1})
rts = labels_from_cas(combine_branches([Tensor(one_class(rts_low))], 8).data, 0.7, {1})
print("original scale picks", ots.indices[ots.classes == 1].tolist())
print("reduced scale picks ", rts.indices[rts.classes == 1].tolist())

# Labels travel the other way through the index map: original step t lands
# on branch step t / 2 when t is even, and is dropped otherwise.

print("mapped to the half-rate branch:", map_indices(ots, 1, 4).as_dict())

# ## Initial labels from two streams
#
# The first round of labels comes from fusing the rgb and flow CASs (flow
# weighs 1.5 times as much) and keeping confident steps only.

rgb = np.array([[0.1, 0.2, 0.9, 0.95], [0.9, 0.8, 0.1, 0.05]])
flow = np.array([[0.05, 0.5, 0.97, 0.9], [0.95, 0.5, 0.03, 0.1]])
fused = fuse_cas(rgb, flow)
print(np.round(fused, 3))
print("initial labels:", initial_labels(fused, {1}).as_dict())

# ## Proposals
#
# Runs of steps above a threshold become proposals; each is scored by how
# much brighter it is than its flanks.

row = np.array([0.1, 0.2, 0.8, 0.9, 0.85, 0.3, 0.1, 0.6, 0.7, 0.2])
props = proposals_from_cas(one_class(row), 0.5)
for p in props:
    print(p.start, p.end, "contrast", round(oic_score(one_class(row), p), 3))

# ## Suppression
#
# Greedy, per class: [0, 9] at 0.9 removes [1, 9] at 0.8 (IoU 0.9), while
# the class-2 copy survives.

kept = nms([Proposal(1, 0, 9, 0.9), Proposal(1, 1, 9, 0.8), Proposal(2, 1, 9, 0.7)], 0.7)
print([(p.cls, p.start, p.end) for p in kept])

# ## Seconds
#
# A step covers 16 frames, so at 16 fps it lasts one second.

for d in localize_video(one_class(row), one_class(row), 16.0, "toy"):
    print(f"class {d.cls}: {d.t_start:.0f}s - {d.t_end:.0f}s  score {d.score:.3f}")
