"""Inference-time applications of a trained model.

All functions use posterior means, so outputs are a deterministic function of
inputs, checkpoint and seed. Images are float arrays (H, W, 3) in [-1, 1].
"""
from __future__ import annotations

import math

import numpy as np
import torch

from .evalkit import TriangleMesh, marching_cubes
from .geom3d import CameraModel, Viewpoint, VoxelGrid, render_depth_batch
from .nets import SISTNetworks

__all__ = [
    "SISTModel",
    "norm_corrected_lerp",
    "interpolation_codes",
]

DEFAULT_NVS_ELEVATION = math.radians(10.0)


def norm_corrected_lerp(a, b, t: float) -> np.ndarray:
    """Linear interpolation rescaled so the norm moves linearly from |a| to |b|.

    Keeps intermediate codes on the shell where Gaussian codes concentrate,
    instead of cutting through the low-norm interior.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    z = (1.0 - t) * a + t * b
    n = np.linalg.norm(z)
    if n < 1e-12:
        raise ValueError(f"interpolated code vanishes at t={t}; the endpoints are (nearly) antipodal")
    return z * (((1.0 - t) * np.linalg.norm(a) + t * np.linalg.norm(b)) / n)


def interpolation_codes(a, b, steps: int) -> list[np.ndarray]:
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    return [norm_corrected_lerp(a, b, t) for t in np.linspace(0.0, 1.0, steps)]


class SISTModel:
    """Networks plus the camera they were trained with."""

    def __init__(self, nets: SISTNetworks, dtype=None):
        self.nets = nets.eval()
        self.cfg = nets.cfg
        self.dtype = dtype or next(nets.parameters()).dtype
        self.camera = CameraModel.default(self.cfg.image_size)

    @classmethod
    def from_checkpoint(cls, directory, dtype=None) -> "SISTModel":
        from .trainer import load_networks

        nets, _ = load_networks(directory, dtype)
        return cls(nets)

    # ------------------------------------------------------------ plumbing

    def _images(self, images) -> torch.Tensor:
        x = np.asarray(images, np.float32)
        if x.ndim == 3:
            x = x[None]
        s = self.cfg.image_size
        if x.shape[1:] != (s, s, 3):
            raise ValueError(f"expected images of shape ({s}, {s}, 3), got {x.shape[1:]}")
        return torch.as_tensor(x).permute(0, 3, 1, 2).to(self.dtype)

    def _shape_array(self, shape) -> np.ndarray:
        occ = shape.occupancy if isinstance(shape, VoxelGrid) else np.asarray(shape, bool)
        return occ

    @torch.no_grad()
    def encode(self, images) -> dict:
        """Posterior means of z_s and z_a plus the estimated viewpoints."""
        x = self._images(images)
        raw = self.nets.view_encoder(x)
        az, el = self.nets.view_encoder.to_angles(raw)
        return {
            "zs": self.nets.shape_encoder(x).mean.double().numpy(),
            "za": self.nets.appearance_encoder(x).mean.double().numpy(),
            "views": [Viewpoint(float(a), float(e)) for a, e in zip(az, el)],
        }

    @torch.no_grad()
    def decode_shape(self, zs, resolution: int | None = None, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        """(probabilities, boolean occupancy), each (B, R, R, R)."""
        z = torch.as_tensor(np.atleast_2d(zs)).to(self.dtype)
        coarse = 32 if resolution and resolution > 128 else None
        probs = self.nets.decode_grid(z, resolution, coarse=coarse).double().numpy()
        return probs, probs >= threshold

    @torch.no_grad()
    def generate(self, shapes, views, za) -> np.ndarray:
        """Render each shape at its viewpoint and translate with its appearance code."""
        occ = [self._shape_array(s) for s in shapes]
        depth = torch.as_tensor(render_depth_batch(occ, views, self.camera)).to(self.dtype)[:, None]
        z = torch.as_tensor(np.atleast_2d(za)).to(self.dtype)
        return self.nets.generator(depth, z).permute(0, 2, 3, 1).double().numpy()

    # ------------------------------------------------------------ applications

    def reconstruct_shape(self, image, resolution: int | None = None) -> tuple[VoxelGrid, TriangleMesh]:
        zs = self.encode(image)["zs"]
        probs, occ = self.decode_shape(zs[:1], resolution)
        return VoxelGrid(occ[0]), marching_cubes(probs[0])

    def generate_image(self, shape, view: Viewpoint, za=None, rng=None) -> np.ndarray:
        if za is None:
            za = np.random.default_rng(rng).standard_normal(self.cfg.za_dim)
        za = np.asarray(za, np.float64)
        if za.shape != (self.cfg.za_dim,):
            raise ValueError(f"appearance code must have shape ({self.cfg.za_dim},), got {za.shape}")
        return self.generate([shape], [view], za[None])[0]

    def _reconstruct_at(self, image, views_fn) -> list[np.ndarray]:
        code = self.encode(image)
        _, occ = self.decode_shape(code["zs"][:1])
        views = views_fn(code["views"][0])
        n = len(views)
        return list(self.generate([occ[0]] * n, views, np.repeat(code["za"][:1], n, 0)))

    def reconstruct_image(self, image) -> np.ndarray:
        return self._reconstruct_at(image, lambda v: [v])[0]

    def novel_views(self, image, azimuths, elevation: float = DEFAULT_NVS_ELEVATION) -> list[np.ndarray]:
        """Angles in radians."""
        return self._reconstruct_at(image, lambda _v: [Viewpoint(float(a), float(elevation)) for a in azimuths])

    def _code(self, x, key: str) -> np.ndarray:
        x = np.asarray(x)
        return self.encode(x)[key][0] if x.ndim >= 3 else x.astype(np.float64)

    def interpolate_appearance(self, a, b, steps: int, shape, view: Viewpoint) -> list[np.ndarray]:
        """``a`` and ``b`` are images or appearance codes; shape and viewpoint stay fixed."""
        codes = interpolation_codes(self._code(a, "za"), self._code(b, "za"), steps)
        return list(self.generate([shape] * steps, [view] * steps, np.stack(codes)))

    def interpolate_shape(self, a, b, steps: int, resolution: int | None = None) -> list[TriangleMesh]:
        """``a`` and ``b`` are images or shape codes."""
        codes = interpolation_codes(self._code(a, "zs"), self._code(b, "zs"), steps)
        probs, _ = self.decode_shape(np.stack(codes), resolution)
        return [marching_cubes(p) for p in probs]

    def modify_shape(self, image, shape) -> np.ndarray:
        """Appearance and viewpoint from ``image``, geometry from ``shape``."""
        code = self.encode(image)
        return self.generate([shape], code["views"][:1], code["za"][:1])[0]
