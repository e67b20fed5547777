"""
Applications of a trained model
===============================

Uses the checkpoint written by ``train_toy.py`` (run it first): single-view
reconstruction, shape-conditioned image generation, novel views, appearance
and shape interpolation, and shape modification.
"""
import math
from pathlib import Path

import numpy as np

from sist.apps import SISTModel
from sist.datasets import write_image
from sist.evalkit import iou, write_obj
from sist.geom3d import Viewpoint
from sist.toy import make_toy_data
from sist.trainer import latest_checkpoint

out = Path("demo_out/apps")
out.mkdir(parents=True, exist_ok=True)
ckpt = latest_checkpoint("demo_out/toy_run")
if ckpt is None:
    raise SystemExit("no checkpoint found; run train_toy.py first")
model = SISTModel.from_checkpoint(ckpt)
shapes, images, gt, _ = make_toy_data(32, 64, per_shape=4)

photo = images.by_id("chair_000")
grid, mesh = model.reconstruct_shape(photo, 32)
write_obj(mesh, out / "chair_reconstruction.obj")
print(f"reconstruction: IoU with the true chair {iou(grid, shapes.by_id('chair')):.3f}, {len(mesh.faces)} faces")

code = model.encode(photo)
v = code["views"][0]
print(f"estimated view: azimuth {math.degrees(v.azimuth):.1f}, elevation {math.degrees(v.elevation):.1f}")

write_image(model.generate_image(shapes.by_id("car"), Viewpoint(0.6, 0.3), rng=0), out / "car_generated.png")
write_image(model.reconstruct_image(photo), out / "chair_cycle.png")

for k, img in enumerate(model.novel_views(photo, np.radians([-90, 0, 90, 180]))):
    write_image(img, out / f"chair_view_{k}.png")

other = images.by_id("table_001")
for k, img in enumerate(model.interpolate_appearance(photo, other, 5, shapes.by_id("ramp"), Viewpoint(0.8, 0.4))):
    write_image(img, out / f"appearance_{k}.png")
for k, m in enumerate(model.interpolate_shape(photo, other, 5, 32)):
    write_obj(m, out / f"shape_{k}.obj")

write_image(model.modify_shape(photo, shapes.by_id("stairs")), out / "chair_as_stairs.png")
print("outputs written to", out)
