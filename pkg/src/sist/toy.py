"""Procedural toy data: chunky primitive shapes and coloured depth-shaded renderings.

Every shape lacks rotational symmetry about the vertical axis so that the
azimuth of a rendering is recoverable from its silhouette and depth.
"""
from __future__ import annotations

import colorsys

import numpy as np

from .datasets import ImageDataset, ShapeDataset, make_paired_subset
from .geom3d import CameraModel, VoxelGrid, render_depth, sample_viewpoint, wrap_angle

__all__ = [
    "toy_shapes",
    "render_toy_image",
    "toy_images",
    "make_toy_data",
    "toy_net_config",
    "toy_train_config",
    "toy_reconstruction_iou",
    "toy_azimuth_mae",
    "TOY_SHAPE_NAMES",
]


def _coords(res, scale=1.2):
    # builders are written for a +-0.42 envelope; scaling fills the cube
    c = ((np.arange(res) + 0.5) / res - 0.5) / scale
    return np.meshgrid(c, c, c, indexing="ij")


def _box(x, y, z, lo, hi):
    return (x >= lo[0]) & (x <= hi[0]) & (y >= lo[1]) & (y <= hi[1]) & (z >= lo[2]) & (z <= hi[2])


def _cyl_y(x, y, z, cx, cz, r, y0, y1):
    return ((x - cx) ** 2 + (z - cz) ** 2 <= r * r) & (y >= y0) & (y <= y1)


def _ball(x, y, z, c, r):
    return (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 <= r * r


def _l_block(x, y, z):
    return _box(x, y, z, (-0.35, -0.35, -0.3), (0.35, -0.05, 0.3)) | _box(x, y, z, (-0.35, -0.05, -0.3), (-0.05, 0.35, 0.0))


def _chair(x, y, z):
    seat = _box(x, y, z, (-0.28, -0.05, -0.28), (0.28, 0.05, 0.28))
    back = _box(x, y, z, (-0.28, 0.05, -0.28), (0.28, 0.4, -0.16))
    legs = np.zeros_like(seat)
    for sx in (-1, 1):
        for sz in (-1, 1):
            legs |= _box(x, y, z, (sx * 0.22 - 0.06, -0.4, sz * 0.22 - 0.06), (sx * 0.22 + 0.06, -0.05, sz * 0.22 + 0.06))
    return seat | back | legs


def _stairs(x, y, z):
    out = np.zeros_like(x, bool)
    for i in range(3):
        out |= _box(x, y, z, (-0.36 + 0.24 * i, -0.36, -0.25), (0.36, -0.36 + 0.24 * (i + 1), 0.25))
    return out


def _car(x, y, z):
    body = _box(x, y, z, (-0.42, -0.22, -0.2), (0.42, 0.0, 0.2))
    cabin = _box(x, y, z, (-0.3, 0.0, -0.18), (0.08, 0.2, 0.18))
    return body | cabin


def _tee(x, y, z):
    bar = _box(x, y, z, (-0.4, -0.15, -0.38), (0.4, 0.15, -0.12))
    stem = _box(x, y, z, (-0.13, -0.15, -0.12), (0.13, 0.15, 0.4))
    return bar | stem


def _lollipop(x, y, z):
    return _ball(x, y, z, (0.12, 0.1, 0.1), 0.27) | _box(x, y, z, (-0.42, -0.35, -0.1), (0.12, -0.1, 0.1))


def _ramp(x, y, z):
    # wedge rising along +x, with a block at the low end
    wedge = (y <= -0.35 + 0.75 * (x + 0.4) / 0.8) & _box(x, y, z, (-0.4, -0.35, -0.28), (0.4, 0.4, 0.28))
    return wedge | _box(x, y, z, (-0.4, -0.35, 0.28), (-0.1, -0.05, 0.4))


def _u_shape(x, y, z):
    base = _box(x, y, z, (-0.38, -0.38, -0.38), (0.38, -0.12, 0.38))
    left = _box(x, y, z, (-0.38, -0.12, -0.38), (-0.14, 0.3, 0.38))
    back = _box(x, y, z, (-0.38, -0.12, -0.38), (0.38, 0.3, -0.16))
    return base | left | back


def _tower(x, y, z):
    return _cyl_y(x, y, z, -0.15, -0.1, 0.18, -0.42, 0.42) | _box(x, y, z, (-0.15, -0.42, -0.05), (0.4, -0.05, 0.35))


def _table(x, y, z):
    top = _box(x, y, z, (-0.4, 0.08, -0.25), (0.4, 0.2, 0.25))
    post = _box(x, y, z, (0.12, -0.4, -0.1), (0.32, 0.08, 0.1))
    foot = _box(x, y, z, (-0.3, -0.4, -0.2), (0.35, -0.28, 0.2))
    return top | post | foot


_BUILDERS = {
    "l_block": _l_block,
    "chair": _chair,
    "stairs": _stairs,
    "car": _car,
    "tee": _tee,
    "lollipop": _lollipop,
    "ramp": _ramp,
    "u_shape": _u_shape,
    "tower": _tower,
    "table": _table,
}
TOY_SHAPE_NAMES = tuple(_BUILDERS)


def toy_shapes(resolution: int = 32) -> ShapeDataset:
    x, y, z = _coords(resolution)
    grids = [VoxelGrid(f(x, y, z)) for f in _BUILDERS.values()]
    return ShapeDataset(grids, list(_BUILDERS), "procedural")


def render_toy_image(grid: VoxelGrid, view, hue: float, cam: CameraModel) -> np.ndarray:
    """Flat-coloured, depth-shaded rendering on a white background, values in [-1, 1]."""
    depth = render_depth(grid, view, cam).values
    base = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.9))
    shade = 0.55 + 0.45 * depth
    rgb = np.where((depth > -1.0)[..., None], base * shade[..., None], 1.0)
    return (rgb * 2.0 - 1.0).astype(np.float32)


def toy_images(shapes: ShapeDataset, per_shape: int, image_size: int = 64, seed: int = 0):
    """Random-viewpoint, random-hue renderings. Returns (ImageDataset, image->shape map, views)."""
    rng = np.random.default_rng(seed)
    cam = CameraModel.default(image_size)
    imgs, ids, gt, views = [], [], {}, {}
    for sid, grid in zip(shapes.ids, shapes.grids):
        for j in range(per_shape):
            v = sample_viewpoint(rng)
            iid = f"{sid}_{j:03d}"
            imgs.append(render_toy_image(grid, v, rng.random(), cam))
            ids.append(iid)
            gt[iid] = sid
            views[iid] = v
    return ImageDataset(np.stack(imgs), ids, "train"), gt, views


def make_toy_data(resolution: int = 32, image_size: int = 64, per_shape: int = 40, supervision_rate: float = 0.0, seed: int = 0):
    """Shapes, real images, ground-truth map and (when rate > 0) a paired subset."""
    shapes = toy_shapes(resolution)
    images, gt, views = toy_images(shapes, per_shape, image_size, seed)
    pairs = make_paired_subset(images, shapes, gt, supervision_rate, seed) if supervision_rate > 0 else None
    return shapes, images, gt, pairs


def toy_net_config(decoder_type: str = "implicit", **overrides) -> dict:
    """Reduced widths for 64x64 images and 32^3 shapes on a CPU budget."""
    net = dict(
        image_size=64,
        voxel_res=32,
        gen_width=8,
        disc_width=16,
        enc_width=16,
        dec_width=64,
        implicit_hidden=(512, 256, 128, 64),
        decoder_type=decoder_type,
    )
    net.update(overrides)
    return net


def toy_train_config(decoder_type: str = "implicit", supervision_rate: float = 0.0, steps: int = 2000, **overrides):
    """Training settings for the toy end-to-end runs."""
    from .trainer import TrainConfig

    cfg = dict(
        decoder_type=decoder_type,
        batch_size=16,
        lr=1e-3,
        max_steps=steps,
        # at toy scale the default adversarial weight leaves generated images far from the real ones,
        # and the shape encoder trained on them does not transfer
        weights=dict(image=1.0),
        supervision_rate=supervision_rate,
        net=toy_net_config(decoder_type),
        seed=0,
    )
    cfg.update(overrides)
    return TrainConfig(**cfg)


def toy_reconstruction_iou(model, shapes: ShapeDataset, images: ImageDataset, gt: dict, shape_ids, per_shape: int = 8) -> float:
    """Mean IoU at 32^3 of ``reconstruct_shape`` on real images of the given shapes."""
    from .evalkit import iou

    scores = []
    for sid in shape_ids:
        target = shapes.by_id(sid)
        for iid in [i for i in images.ids if gt[i] == sid][:per_shape]:
            grid, _ = model.reconstruct_shape(images.by_id(iid), 32)
            scores.append(iou(grid, target))
    return float(np.mean(scores))


def toy_azimuth_mae(model, shapes: ShapeDataset, n: int = 128, seed: int = 0) -> float:
    """Mean absolute azimuth error (degrees) of the viewpoint encoder on generated images."""
    rng = np.random.default_rng(seed)
    views = [sample_viewpoint(rng) for _ in range(n)]
    grids = [shapes.grids[i] for i in rng.integers(0, len(shapes), n)]
    za = rng.standard_normal((n, model.cfg.za_dim))
    fake = model.generate(grids, views, za)
    est = model.encode(fake)["views"]
    err = [abs(float(wrap_angle(e.azimuth - v.azimuth))) for e, v in zip(est, views)]
    return float(np.degrees(np.mean(err)))
