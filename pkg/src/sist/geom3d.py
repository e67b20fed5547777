"""Voxel grids, viewpoints and the parameter-free depth projection.

World frame: the grid occupies the unit cube centred at the origin, the camera
sits at a fixed distance from the centre and looks along its own -z axis.
``occupancy[i, j, k]`` is the cell spanning ``origin + (i, j, k) * voxel_size``
along world x, y, z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "VoxelGrid",
    "Viewpoint",
    "CameraModel",
    "DepthMap",
    "rotation_from_viewpoint",
    "sample_viewpoint",
    "render_depth",
    "render_depth_batch",
    "pixel_rays",
    "depth_quantum",
    "viewpoint_to_raw",
    "raw_to_viewpoint",
    "wrap_angle",
    "save_depth_png",
    "load_depth_png",
]

BACKGROUND = -1.0


@dataclass(frozen=True)
class VoxelGrid:
    occupancy: np.ndarray
    voxel_size: float | None = None
    origin: tuple[float, float, float] | None = None

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 3:
            raise ValueError(f"voxel grid must be 3D, got shape {occ.shape}")
        if not (occ.shape[0] == occ.shape[1] == occ.shape[2]):
            raise ValueError(f"voxel grid must be cubic, got shape {occ.shape}")
        if occ.shape[0] < 2:
            raise ValueError(f"voxel grid resolution must be >= 2, got {occ.shape[0]}")
        occ = occ.astype(bool, copy=False)
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)
        if self.voxel_size is None:
            object.__setattr__(self, "voxel_size", 1.0 / occ.shape[0])
        if self.origin is None:
            half = 0.5 * self.voxel_size * occ.shape[0]
            object.__setattr__(self, "origin", (-half, -half, -half))

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def extent(self) -> float:
        return self.voxel_size * self.resolution

    def centroid_offset(self) -> float:
        """Distance of the occupied-cell centroid from the grid centre, in extents."""
        idx = np.argwhere(self.occupancy)
        if len(idx) == 0:
            return 0.0
        c = (idx.mean(axis=0) + 0.5) / self.resolution - 0.5
        return float(np.abs(c).max())


@dataclass(frozen=True)
class Viewpoint:
    azimuth: float
    elevation: float

    def wrapped(self) -> "Viewpoint":
        return Viewpoint(wrap_angle(self.azimuth), self.elevation)


@dataclass(frozen=True)
class CameraModel:
    distance: float
    fov_y: float
    height: int = 128
    width: int = 128

    @classmethod
    def default(cls, size: int = 128, extent: float = 1.0, coverage: float = 0.9) -> "CameraModel":
        """Camera at 2.4 half-extents whose frame fits the bounding sphere at ``coverage`` of the height."""
        half = 0.5 * extent
        distance = 2.4 * half
        radius = math.sqrt(3.0) * half
        alpha = math.asin(radius / distance)
        fov_y = 2.0 * math.atan(math.tan(alpha) / coverage)
        return cls(distance=distance, fov_y=fov_y, height=size, width=size)


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("depth map must be 2D")
        if np.any(v < -1.0) or np.any(v > 1.0):
            raise ValueError("depth values must lie in [-1, 1]")
        object.__setattr__(self, "values", v)

    @property
    def foreground(self) -> np.ndarray:
        return self.values > BACKGROUND


def wrap_angle(a):
    """Wrap angles to [-pi, pi)."""
    return (a + np.pi) % (2 * np.pi) - np.pi


def viewpoint_to_raw(azimuth, elevation):
    """Map angles to the encoder's tanh space: theta/pi and affine phi -> [-1, 1]."""
    return np.asarray(azimuth) / np.pi, np.asarray(elevation) / (np.pi / 2) * 2.0 - 1.0


def raw_to_viewpoint(raw0, raw1):
    return np.asarray(raw0) * np.pi, (np.asarray(raw1) + 1.0) / 2.0 * (np.pi / 2)


def rotation_from_viewpoint(v: Viewpoint) -> np.ndarray:
    """World-to-camera rotation ``R_x(elevation) @ R_y(azimuth)``."""
    ct, st = math.cos(v.azimuth), math.sin(v.azimuth)
    cp, sp = math.cos(v.elevation), math.sin(v.elevation)
    ry = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return rx @ ry


def sample_viewpoint(rng: np.random.Generator) -> Viewpoint:
    theta = rng.uniform(-np.pi, np.pi)
    phi = rng.uniform(0.0, np.pi / 2)
    # uniform() is half-open; keep both ranges open
    while theta == -np.pi:
        theta = rng.uniform(-np.pi, np.pi)
    while phi == 0.0:
        phi = rng.uniform(0.0, np.pi / 2)
    return Viewpoint(float(theta), float(phi))


def _depth_range(cam: CameraModel, extent: float) -> tuple[float, float]:
    radius = math.sqrt(3.0) * 0.5 * extent
    return cam.distance - radius, cam.distance + radius


def depth_quantum(cam: CameraModel, grid: VoxelGrid | int) -> float:
    """Normalized-depth change corresponding to one voxel diagonal."""
    if isinstance(grid, VoxelGrid):
        vs, extent = grid.voxel_size, grid.extent
    else:
        vs, extent = 1.0 / grid, 1.0
    dmin, dmax = _depth_range(cam, extent)
    return 2.0 * math.sqrt(3.0) * vs / (dmax - dmin)


def _check_camera(cam: CameraModel, extent: float) -> None:
    radius = math.sqrt(3.0) * 0.5 * extent
    if cam.distance <= radius:
        raise ValueError(
            f"camera distance {cam.distance:.4g} does not clear the grid bounding sphere (radius {radius:.4g})"
        )
    alpha = math.asin(radius / cam.distance)
    half_y = 0.5 * cam.fov_y
    half_x = math.atan(math.tan(half_y) * cam.width / cam.height)
    if math.tan(alpha) > math.tan(min(half_x, half_y)) * (1 + 1e-12):
        raise ValueError("camera frustum cannot contain the grid bounding sphere")


def pixel_rays(v: Viewpoint, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """World-space camera origin (3,) and per-pixel ray directions (H, W, 3).

    Directions are scaled so that the ray parameter equals camera-space depth.
    """
    rot = rotation_from_viewpoint(v)
    t = math.tan(0.5 * cam.fov_y)
    aspect = cam.width / cam.height
    xs = ((np.arange(cam.width) + 0.5) / cam.width * 2.0 - 1.0) * t * aspect
    ys = (1.0 - (np.arange(cam.height) + 0.5) / cam.height * 2.0) * t
    dirs = np.empty((cam.height, cam.width, 3))
    dirs[..., 0] = xs[None, :]
    dirs[..., 1] = ys[:, None]
    dirs[..., 2] = -1.0
    origin = rot.T @ np.array([0.0, 0.0, cam.distance])
    return origin, dirs @ rot  # (R^T d)^T == d^T R


@numba.njit(cache=True)
def _traverse(occ, g0, vs, origin, dirs, out):
    n = occ.shape[0]
    lo = g0
    hi = g0 + vs * n
    H, W = dirs.shape[0], dirs.shape[1]
    idx = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    for r in range(H):
        for c in range(W):
            out[r, c] = np.inf
            t0 = -np.inf
            t1 = np.inf
            for a in range(3):
                d = dirs[r, c, a]
                if d == 0.0:
                    if origin[a] < lo or origin[a] > hi:
                        t0 = np.inf
                    continue
                ta = (lo - origin[a]) / d
                tb = (hi - origin[a]) / d
                if ta > tb:
                    ta, tb = tb, ta
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
            if t0 > t1 or t1 < 0.0:
                continue
            if t0 < 0.0:
                t0 = 0.0
            for a in range(3):
                d = dirs[r, c, a]
                p = origin[a] + t0 * d
                i = int(math.floor((p - g0) / vs))
                if i < 0:
                    i = 0
                elif i > n - 1:
                    i = n - 1
                idx[a] = i
                if d > 0.0:
                    step[a] = 1
                    tmax[a] = (g0 + (i + 1) * vs - origin[a]) / d
                    tdelta[a] = vs / d
                elif d < 0.0:
                    step[a] = -1
                    tmax[a] = (g0 + i * vs - origin[a]) / d
                    tdelta[a] = -vs / d
                else:
                    step[a] = 0
                    tmax[a] = np.inf
                    tdelta[a] = np.inf
            tcur = t0
            while True:
                if occ[idx[0], idx[1], idx[2]]:
                    out[r, c] = tcur
                    break
                a = 0
                if tmax[1] < tmax[a]:
                    a = 1
                if tmax[2] < tmax[a]:
                    a = 2
                tcur = tmax[a]
                idx[a] += step[a]
                if idx[a] < 0 or idx[a] >= n:
                    break
                tmax[a] += tdelta[a]


def _normalize_depth(raw: np.ndarray, cam: CameraModel, extent: float) -> np.ndarray:
    dmin, dmax = _depth_range(cam, extent)
    out = np.full(raw.shape, BACKGROUND)
    hit = np.isfinite(raw)
    out[hit] = np.clip(1.0 - 2.0 * (raw[hit] - dmin) / (dmax - dmin), -1.0, 1.0)
    return out


def render_raw_depth(grid: VoxelGrid, v: Viewpoint, cam: CameraModel) -> np.ndarray:
    """Camera-space depth of the first occupied cell per pixel (inf for background)."""
    _check_camera(cam, grid.extent)
    origin, dirs = pixel_rays(v, cam)
    out = np.empty((cam.height, cam.width))
    _traverse(
        np.ascontiguousarray(grid.occupancy),
        float(grid.origin[0]),
        float(grid.voxel_size),
        origin,
        np.ascontiguousarray(dirs),
        out,
    )
    return out


def render_depth(grid: VoxelGrid, v: Viewpoint, cam: CameraModel) -> DepthMap:
    if len(set(np.round(grid.origin, 12))) != 1:
        raise ValueError("renderer expects a grid with equal origin coordinates on all axes")
    raw = render_raw_depth(grid, v, cam)
    return DepthMap(_normalize_depth(raw, cam, grid.extent))


def render_depth_batch(occupancies, viewpoints, cam: CameraModel) -> np.ndarray:
    """Render a stack of unit-cube grids, returning a (B, H, W) float array."""
    out = np.empty((len(viewpoints), cam.height, cam.width))
    for b, (occ, v) in enumerate(zip(occupancies, viewpoints)):
        grid = occ if isinstance(occ, VoxelGrid) else VoxelGrid(occ)
        out[b] = render_depth(grid, v, cam).values
    return out


def save_depth_png(depth: DepthMap | np.ndarray, path) -> None:
    from PIL import Image

    values = depth.values if isinstance(depth, DepthMap) else np.asarray(depth)
    q = np.round((values + 1.0) / 2.0 * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_depth_png(path) -> DepthMap:
    from PIL import Image

    q = np.asarray(Image.open(path)).astype(np.float64)
    return DepthMap(q / 65535 * 2.0 - 1.0)
