"""
Rendering voxel shapes to depth maps
====================================

The projection unit turns an occupancy grid and a viewpoint into a normalized
depth map: 1 at the nearest possible surface, -1 for background.
"""
import math
from pathlib import Path

import numpy as np

from sist.geom3d import CameraModel, Viewpoint, depth_quantum, render_depth, save_depth_png
from sist.toy import toy_shapes

out = Path("demo_out/render")
out.mkdir(parents=True, exist_ok=True)

# ten procedural shapes at 32^3, centred in the unit cube
shapes = toy_shapes(32)
chair = shapes.by_id("chair")
print("chair occupancy:", chair.occupancy.sum(), "of", chair.occupancy.size, "cells")

# camera at 1.2 units, field of view chosen so the bounding sphere fills 90% of the frame
cam = CameraModel.default(128)
print(f"camera distance {cam.distance:.2f}, vertical fov {math.degrees(cam.fov_y):.1f} deg")
print(f"one voxel diagonal spans {depth_quantum(cam, chair):.3f} in normalized depth")

# a turntable at 20 degrees elevation
for k, az in enumerate(np.linspace(-180, 135, 8)):
    depth = render_depth(chair, Viewpoint(math.radians(az), math.radians(20)), cam)
    save_depth_png(depth, out / f"chair_{k}.png")
    print(f"azimuth {az:6.1f}: {depth.foreground.mean():.1%} foreground, nearest {depth.values.max():.3f}")
