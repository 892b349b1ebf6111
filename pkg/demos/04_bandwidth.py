"""How many bytes a message costs at each compression ratio."""

import numpy as np

from disconet.channel import broadcast_round, message_wire_size
from disconet.geometry import Pose
from disconet.graph import transmit
from disconet.networks import Compressor, wire_bytes
from disconet.tensor import Tensor

# Full-scale collaboration features: 256 channels on a 32 x 32 grid.
rng = np.random.default_rng(0)
features = [Tensor(rng.standard_normal((256, 32, 32))) for _ in range(3)]

print("ratio  payload B   wire B   frame total B (3 agents)")
for r in (1, 4, 16, 32, 64):
    comp = Compressor(256, r, rng=rng)
    msgs = [transmit(f, Pose(), comp, sender=j) for j, f in enumerate(features)]
    _, log = broadcast_round(msgs)
    assert msgs[0].byte_size == wire_bytes(256, r, 32)
    print(f"{r:5d}  {msgs[0].byte_size:9d}  {message_wire_size(256 // r, 32):7d}  {log.total_wire_bytes:10d}")

# Broadcast: each agent sends once regardless of how many listeners there are.
# A lone agent sends nothing.
_, log = broadcast_round(msgs[:1])
print("single agent sends", log.total_wire_bytes, "bytes")
