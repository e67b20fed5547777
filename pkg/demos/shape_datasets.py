"""
Reading and writing shape and image datasets
============================================

Shapes are stored as binvox or as the package's raw occupancy format
(``SISTVOX1`` header, then bit-packed cells in x-fastest order). A JSON manifest ties shapes and
images together and optionally records which shape an image depicts.
"""
import json
from pathlib import Path

import numpy as np

from sist.datasets import (
    load_manifest,
    next_paired_batch,
    next_unpaired_batch,
    read_binvox,
    read_raw_occupancy,
    write_binvox,
    write_image,
    write_raw_occupancy,
)
from sist.toy import make_toy_data

root = Path("demo_out/dataset")
(root / "shapes").mkdir(parents=True, exist_ok=True)
(root / "images").mkdir(parents=True, exist_ok=True)

shapes, images, gt, _ = make_toy_data(32, 64, per_shape=4)

# both voxel formats round-trip exactly
for sid, grid in zip(shapes.ids, shapes.grids):
    write_raw_occupancy(grid, root / "shapes" / f"{sid}.svox")
    write_binvox(grid, root / "shapes" / f"{sid}.binvox")
    assert np.array_equal(read_raw_occupancy(root / "shapes" / f"{sid}.svox").occupancy, grid.occupancy)
    assert np.array_equal(read_binvox(root / "shapes" / f"{sid}.binvox").occupancy, grid.occupancy)

for iid in images.ids:
    write_image(images.by_id(iid), root / "images" / f"{iid}.png")

manifest = {
    "shapes": [{"id": s, "path": f"shapes/{s}.binvox", "format": "binvox"} for s in shapes.ids],
    "images": [{"id": i, "path": f"images/{i}.png", "shape_id": gt[i]} for i in images.ids],
}
(root / "manifest.json").write_text(json.dumps(manifest, indent=1))

shapes, train, test, gt = load_manifest(root / "manifest.json", image_size=64)
print(f"{len(shapes)} shapes, {len(train)} train images, {len(test)} test images")

rng = np.random.default_rng(0)
batch = next_unpaired_batch(shapes, train, 8, rng)
print("unpaired batch:", batch.images.shape, "images with", len(batch.shapes), "independent shapes")

# a quarter of the training images with their ground-truth shapes, for weak supervision
from sist.datasets import make_paired_subset

pairs = make_paired_subset(train, shapes, gt, 0.25)
paired = next_paired_batch(pairs, 4, rng)
print(f"paired subset of {len(pairs)}; batch images {paired.images.shape}")
