"""
Distilling a blob scene into a tree of small MLPs
==================================================

A two-blob teacher is cut by density-median splits; each node gets its own
small network. Settings are reduced so the script runs in well under a minute.
"""

from dataclasses import replace

import numpy as np

from amnerf.field import MlpArch
from amnerf.scene import imbalanced_scene
from amnerf.subdivision import build_kdtree, build_regular_grid, sample_density_cloud
from amnerf.training import DistillConfig

scene = imbalanced_scene()
cfg = replace(scene.build, max_depth=4, cloud_points=16384, arch=MlpArch(16, 3, 3, 1),
              distill=DistillConfig(iterations=150, batch_size=256))

# the guidance cloud: uniform points with the teacher's normalised density
cloud = sample_density_cloud(scene.teacher, scene.domain, 16384, 4, seed=0)
print("cloud mass", round(cloud.mass, 2), "points with density > 0.1:", int(np.sum(cloud.density > 0.1)))

tree = build_kdtree(scene.teacher, scene.domain, cfg)
print("adaptive:", tree.node_count, "nodes, depth histogram", tree.depth_histogram())

# leaves near the dense blob are small, leaves in empty space are large
for leaf in sorted(tree.leaves(), key=lambda n: n.box.volume())[:3]:
    print("  small leaf", leaf.code, "volume %.4f score %.1f dB" % (leaf.box.volume(), leaf.score))
for leaf in sorted(tree.leaves(), key=lambda n: n.box.volume())[-3:]:
    print("  large leaf", leaf.code, "volume %.4f score %.1f dB" % (leaf.box.volume(), leaf.score))

# a regular 2^3 grid for comparison: every cell the same size whatever it holds
grid = build_regular_grid(scene.teacher, scene.domain, 2, cfg)
print("grid:", grid.node_count, "nodes, leaf scores", [round(l.score, 1) for l in grid.leaves()])
