"""One frame through an untrained student: compress, broadcast, warp, attend, fuse."""

import numpy as np

from disconet.channel import ChannelLog
from disconet.geometry import BEVGridSpec
from disconet.pipeline import StudentModel, prepare_sample
from disconet.scene import SceneConfig, generate_scene

spec = BEVGridSpec(size=64)
sample = prepare_sample(generate_scene(SceneConfig(agent_count=(3, 3)), seed=1), spec)
print("per-agent BEV inputs:", sample.single.shape)

# Feature width 64 at the collaboration stage, compressed 16x on the wire.
# Batch statistics (train mode): with fresh running statistics the untrained
# edge encoder scores every cell the same and the attention is uniform.
model = StudentModel(13, (8, 16, 32, 64, 64), fusion="disco", ratio=16, seed=0).train()
log = ChannelLog()
out = model(sample.inputs(), sample.poses, spec, log=log)

print("intermediate features F:", out.feature.shape, "-> fused H:", out.fused.shape)
for e in log.entries:
    print(f"  agent {e.sender} broadcast {e.payload_bytes} payload bytes ({e.wire_bytes} on the wire) "
          f"to {e.receivers} receivers")

# Every receiver holds one attention map per sender, itself included.
# They are softmax-normalised cell by cell.
for i, maps in enumerate(out.weights):
    total = sum(w.data for w in maps)
    spans = ", ".join(f"{w.data.min():.2f}..{w.data.max():.2f}" for w in maps)
    print(f"  receiver {i}: weight range per sender [{spans}], max |sum - 1| = {np.abs(total - 1).max():.1e}")

# The header output: one objectness logit and six box parameters per cell.
print("detection raster:", out.raster.logits.shape, out.raster.regression.shape)
