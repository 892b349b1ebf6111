"""From a synthetic street scene to the binary BEV tensor each agent feeds its network."""

import numpy as np

from disconet.geometry import BEVGridSpec, merge_point_clouds, voxelize
from disconet.pipeline import holistic_points
from disconet.scene import SceneConfig, generate_scene, local_ground_truth

# A scene: parked and moving cars as 2D boxes, some of them carrying a lidar.
cfg = SceneConfig(agent_count=(3, 3), rays=720)
scene = generate_scene(cfg, seed=4)
print(f"{len(scene.boxes)} cars, {scene.agent_count} of them are agents")
for i, pose in enumerate(scene.agents):
    print(f"  agent {i}: x={pose.x:6.1f} y={pose.y:6.1f} yaw={np.degrees(pose.yaw):6.1f} deg, "
          f"{len(scene.points[i])} points")

# Each agent sees only what is not occluded.  Merging every scan in the world
# frame gives the holistic view the teacher is trained on.
merged = merge_point_clouds(scene.observations())
print("merged cloud:", merged.shape)

# 64 m x 64 m at 1 m cells, 13 height slices -> a (64, 64, 13) occupancy grid.
spec = BEVGridSpec(size=64)
own = voxelize(scene.points[0], spec).values
holo = voxelize(holistic_points(scene, 0), spec).values
print("occupied voxels, agent 0 alone:", int(own.sum()), " with everyone's points:", int(holo.sum()))

# Ground truth in agent 0's frame: every car inside the grid, its own excluded.
gt = local_ground_truth(scene, 0, spec)
print(f"{len(gt)} target boxes for agent 0")

# A coarse top-down picture of agent 0's own scan ('#': occupied column).
col = own.any(axis=2)[::2, ::2]
for row in col.T[::-1]:
    print("".join("#" if v else "." for v in row))
