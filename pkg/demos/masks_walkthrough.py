"""Where the distillation masks put their weight, on one hand-built feature map.

Run with ``python3 demos/masks_walkthrough.py``.
"""

import numpy as np

from afd import attention as A
from afd import tensor as T
from afd.gcontext import GcBlockParams, context_vector

np.set_printoptions(precision=3, suppress=True)

# A 4-channel 8x8 map: quiet background plus one bright 2x2 blob that only channel 2 sees.
rng = np.random.default_rng(0)
teacher = rng.normal(0, 0.1, size=(1, 4, 8, 8))
teacher[0, 2, 2:4, 5:7] += 3.0
student = teacher + rng.normal(0, 0.3, size=teacher.shape)

cfg = A.MaskConfig(temperature=0.1, instance_size=4)

# Global masks look at the whole map at once and add the teacher's mask to the student's.
g_ch, g_sp = A.global_masks(teacher[0], student[0], cfg=cfg)
print("global channel mask", g_ch.data, "sum", g_ch.data.sum())  # each side sums to H*W = 64, so 128
print("global spatial mask, rounded")
print(g_sp.data.round(1))  # 2 * C = 8 in total, almost all of it on the blob

# Local masks repeat the same recipe inside each 4x4 patch, so a quiet patch
# still gets its own peak instead of being drowned out by the blob.
loc = A.local_masks(teacher[0], student[0], cfg=cfg)
print("per-patch channel masks")
print(loc.channel_patches.data)
print("local spatial mask, rounded")
print(loc.spatial.data.round(1))

# The loss uses the average of the two.
lv = A.compute_masks([T.Tensor(teacher)], [T.Tensor(student)], cfg)[0]
print("combined spatial mask max at", np.unravel_index(lv.spatial.data[0].argmax(), (8, 8)))

# With a single patch covering the map, local and global coincide.
one = A.compute_masks([T.Tensor(teacher)], [T.Tensor(student)], A.MaskConfig(instance_size=8))[0]
print("single patch |L - G| =", np.abs(one.local_spatial.data - one.global_spatial.data).max())

# Global context: a softmax-weighted pool over pixels. Random weights, so the
# pooled vector is some blend of the pixels; shifting every logit changes nothing.
p = GcBlockParams(4, 2, rng=rng)
for t in p.parameters():
    t.data[...] = rng.normal(size=t.shape)
before = context_vector(T.Tensor(teacher), p).data.ravel()
p.l1.bias.data += 100.0
after = context_vector(T.Tensor(teacher), p).data.ravel()
print("context", before, "after logit shift", after)
