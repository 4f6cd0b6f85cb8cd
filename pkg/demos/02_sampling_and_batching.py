"""
From rays to batched inference
==============================

One ray is walked through the tree, each interval gets the same number of
samples, and samples from many rays are grouped by node before inference.
"""

from dataclasses import replace

import numpy as np

from amnerf.field import MlpArch
from amnerf.geometry import Ray
from amnerf.renderer import render_image
from amnerf.sampling import HCheckParams, SamplingConfig, fill_interval_samples, traverse_ray
from amnerf.scene import single_blob_scene
from amnerf.scheduler import sort_samples_by_node
from amnerf.subdivision import build_kdtree
from amnerf.training import DistillConfig

scene = single_blob_scene()
cfg = replace(scene.build, max_depth=4, cloud_points=8192, arch=MlpArch(16, 2, 3, 1),
              distill=DistillConfig(iterations=80, batch_size=256))
tree = build_kdtree(scene.teacher, scene.domain, cfg)

ray = Ray((-4.0, 0.52, 0.47), (1.0, 0.0, 0.0), 0)
intervals = traverse_ray(tree, ray, None)
for iv in intervals:
    # long and short intervals both get 8 samples
    ts = [round(p.t, 3) for p in fill_interval_samples(iv, 8, "stratified", seed=0, ray=ray)]
    print("node %3d  [%.3f, %.3f)  samples %s" % (iv.node_code, iv.t0, iv.t1, ts[:3] + ["..."]))

# far away, the footprint test stops at coarser nodes
far = HCheckParams(slope=0.5, kappa=1.0)
print("leaf-only intervals:", len(intervals), " with a wide footprint:", len(traverse_ray(tree, ray, far)))

# grouping by node: one inference call per node instead of per sample
codes = tree.leaf_codes(np.random.default_rng(0).random((1000, 3)))
perm, batches = sort_samples_by_node(codes)
print("1000 samples ->", len(batches), "batches, sizes", [len(b) for b in batches])

# the grouped path and the per-ray oracle give the same image, byte for byte
cam = scene.cameras[0].camera(48, 48)
a, sa = render_image(tree, cam, None, SamplingConfig(), path="batched")
b, sb = render_image(tree, cam, None, SamplingConfig(), path="naive")
print("identical:", a.to_bytes() == b.to_bytes(), " samples/ray %.1f" % sa.avg_samples_per_ray,
      " naive evaluated %d of %d" % (sb.evaluated_samples, sb.total_samples))
