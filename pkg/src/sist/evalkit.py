"""Shape metrics: iso-surface extraction, point-cloud sampling, Chamfer distance and IoU."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .geom3d import VoxelGrid

__all__ = [
    "TriangleMesh",
    "marching_cubes",
    "normalize_cloud",
    "sample_points",
    "chamfer_distance",
    "downscale_to_32",
    "iou",
    "mesh_volume",
    "write_obj",
    "read_obj",
    "evaluate_pair",
]


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, np.int64).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh has non-finite vertices")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("mesh face indices out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64))


def marching_cubes(grid, iso: float = 0.5, voxel_size: float | None = None, origin=None) -> TriangleMesh:
    """Iso-surface of an occupancy (or probability) grid.

    The grid is zero-padded by one cell so surfaces touching the boundary
    close. Sample ``i`` sits at the centre of cell ``i``, i.e. at world
    coordinate ``origin + (i + 0.5) * voxel_size``; without a grid the defaults
    place the volume in the unit cube centred at the origin.
    """
    if isinstance(grid, VoxelGrid):
        voxel_size = grid.voxel_size if voxel_size is None else voxel_size
        origin = grid.origin if origin is None else origin
        grid = grid.occupancy
    vol = np.asarray(grid, np.float64)
    if vol.ndim != 3:
        raise ValueError(f"marching cubes needs a 3D grid, got shape {vol.shape}")
    if voxel_size is None:
        voxel_size = 1.0 / max(vol.shape)
    if origin is None:
        origin = tuple(-0.5 * voxel_size * s for s in vol.shape)
    vol = np.pad(vol, 1, constant_values=0.0)
    if not (vol.min() < iso < vol.max()):
        return TriangleMesh.empty()
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, gradient_direction="ascent", allow_degenerate=False)
    verts = (verts - 1.0 + 0.5) * voxel_size + np.asarray(origin, np.float64)
    return TriangleMesh(verts, faces)


def mesh_volume(mesh: TriangleMesh) -> float:
    """Signed volume by the divergence theorem (positive for outward-facing triangles)."""
    if mesh.is_empty:
        return 0.0
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def normalize_cloud(points) -> np.ndarray:
    """Centre on the bounding box and scale so the longest extent is 1."""
    p = np.asarray(points, np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0:
        raise ValueError(f"point cloud must be a non-empty (N, 3) array, got shape {p.shape}")
    if not np.isfinite(p).all():
        raise ValueError("point cloud has non-finite coordinates")
    lo, hi = p.min(0), p.max(0)
    extent = (hi - lo).max()
    if extent <= 0:
        raise ValueError("cannot normalise a point cloud whose points all coincide")
    return (p - 0.5 * (lo + hi)) / extent


def sample_points(mesh: TriangleMesh, n: int = 1024, rng=None, mode: str = "vertices") -> np.ndarray:
    """Random points from a mesh.

    ``mode="vertices"`` picks vertices uniformly, without replacement when
    there are at least ``n``. ``mode="surface"`` samples the triangles by area.
    """
    rng = np.random.default_rng(rng)
    if mesh.is_empty:
        raise ValueError("cannot sample points from an empty mesh")
    if mode == "vertices":
        v = mesh.vertices
        idx = rng.choice(len(v), n, replace=len(v) < n)
        return v[idx].copy()
    if mode == "surface":
        a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        tri = rng.choice(len(area), n, p=area / area.sum())
        u, w = rng.random((2, n, 1))
        flip = (u + w) > 1
        u, w = np.where(flip, 1 - u, u), np.where(flip, 1 - w, w)
        return a[tri] + u * (b[tri] - a[tri]) + w * (c[tri] - a[tri])
    raise ValueError(f"unknown sampling mode {mode!r}; use 'vertices' or 'surface'")


def chamfer_distance(p1, p2) -> float:
    """Mean nearest-neighbour Euclidean distance, summed over both directions."""
    a = np.asarray(p1, np.float64)
    b = np.asarray(p2, np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point clouds")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(d_ab.mean() + d_ba.mean())


def _occupancy(g) -> np.ndarray:
    return g.occupancy if isinstance(g, VoxelGrid) else np.asarray(g, bool)


def downscale_to_32(grid) -> VoxelGrid:
    """Block-majority downsampling: a cell is occupied when at least half its sub-cells are."""
    occ = _occupancy(grid)
    r = occ.shape[0]
    if r % 32:
        raise ValueError(f"resolution {r} is not a multiple of 32")
    f = r // 32
    counts = occ.reshape(32, f, 32, f, 32, f).sum(axis=(1, 3, 5))
    return VoxelGrid(2 * counts >= f**3)


def iou(a, b) -> float:
    """|A and B| / |A or B|, 1 when both are empty."""
    x, y = _occupancy(a), _occupancy(b)
    if x.shape != y.shape:
        raise ValueError(f"IoU needs equal resolutions, got {x.shape} and {y.shape}")
    union = np.count_nonzero(x | y)
    if union == 0:
        return 1.0
    return np.count_nonzero(x & y) / union


def evaluate_pair(pred, gt, metrics=("cd", "iou"), n_points: int = 1024, rng=None, mode: str = "vertices") -> dict:
    """Metrics for one predicted/ground-truth grid pair.

    IoU is taken at 32^3; CD on normalised point samples of both iso-surfaces.
    """
    rng = np.random.default_rng(rng)
    out = {}
    if "iou" in metrics:
        p32 = downscale_to_32(pred) if _occupancy(pred).shape[0] != 32 else pred
        g32 = downscale_to_32(gt) if _occupancy(gt).shape[0] != 32 else gt
        out["iou"] = iou(p32, g32)
    if "cd" in metrics:
        mp, mg = marching_cubes(_occupancy(pred)), marching_cubes(_occupancy(gt))
        if mp.is_empty or mg.is_empty:
            out["cd"] = float("nan")
        else:
            cp = normalize_cloud(sample_points(mp, n_points, rng, mode))
            cg = normalize_cloud(sample_points(mg, n_points, rng, mode))
            out["cd"] = chamfer_distance(cp, cg)
    return out


def write_obj(mesh: TriangleMesh, path) -> None:
    """Vertices and 1-based triangle faces, no normals."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for ln in Path(path).read_text().splitlines():
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(t) for t in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(t.split("/")[0]) - 1 for t in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, np.int64).reshape(-1, 3))
