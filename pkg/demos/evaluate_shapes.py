"""
Shape evaluation: meshes, Chamfer distance and IoU
==================================================

Grids are meshed with marching cubes, points are sampled from the mesh, both
clouds are normalized, and the Chamfer distance is the sum of the two mean
nearest-neighbour distances. IoU is computed on 32^3 grids.
"""
import numpy as np

from sist.evalkit import chamfer_distance, evaluate_pair, iou, marching_cubes, mesh_volume, sample_points
from sist.toy import toy_shapes

c = (np.arange(64) + 0.5) / 64 - 0.5
x, y, z = np.meshgrid(c, c, c, indexing="ij")
sphere = x**2 + y**2 + z**2 <= 0.35**2
mesh = marching_cubes(sphere)
r = np.linalg.norm(mesh.vertices, axis=1)
print(f"sphere mesh: {len(mesh.vertices)} vertices, radius {r.min():.3f}..{r.max():.3f} (true 0.35)")
print(f"volume {mesh_volume(mesh):.4f} vs {4 / 3 * np.pi * 0.35**3:.4f}")
print("empty grid gives an empty mesh:", marching_cubes(np.zeros((32, 32, 32))).is_empty)

rng = np.random.default_rng(0)
a, b = sample_points(mesh, 1024, rng), sample_points(mesh, 1024, rng)
print(f"CD between two samplings of the same mesh {chamfer_distance(a, b):.4f}")

shapes = toy_shapes(64)
names = shapes.ids[:4]
print("pairwise IoU / CD:")
for i in names:
    row = []
    for j in names:
        m = evaluate_pair(shapes.by_id(i).occupancy, shapes.by_id(j).occupancy, rng=np.random.default_rng(0))
        row.append(f"{m['iou']:.2f}/{m['cd']:.3f}")
    print(f"{i:8s}", "  ".join(row))
print("IoU of a grid with itself", iou(shapes.grids[0], shapes.grids[0]))
