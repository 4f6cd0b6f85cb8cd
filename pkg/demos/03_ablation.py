"""
Adaptive vs regular, with and without the footprint test
========================================================

A reduced version of ``amnerf ablate``: both trees are small and the image is
64x64, so the numbers only show the shape of the comparison.
"""

from dataclasses import replace

from amnerf.cli import ablation_rows
from amnerf.field import MlpArch
from amnerf.renderer import render_image, render_reference, write_ppm
from amnerf.scene import imbalanced_scene
from amnerf.training import DistillConfig

scene = imbalanced_scene()
scene = replace(scene,
                build=replace(scene.build, max_depth=6, cloud_points=16384, arch=MlpArch(16, 3, 3, 1),
                              distill=DistillConfig(iterations=150, batch_size=256)),
                render=replace(scene.render, width=64, height=64, reference_steps=256))
cams = [scene.cameras[0].camera(64, 64)]

rows, trees = ablation_rows(scene, 4, cameras=cams)
print("nodes: adaptive", trees["adaptive"].node_count, " regular", trees["regular"].node_count)
print("config              psnr_db  samples/ray  batches")
for name, psnr, spr, nb, ms in rows:
    print("%-18s %8.2f %12.2f %8d" % (name, psnr, spr, nb))

# pictures to look at
ref = render_reference(scene.teacher, cams[0], 256)
img, _ = render_image(trees["adaptive"], cams[0], scene.hcheck(cams[0]), scene.sampling)
write_ppm(ref, "reference.ppm")
write_ppm(img, "adaptive.ppm")
print("wrote reference.ppm and adaptive.ppm")
