"""
Network architectures
=====================

Builds every network at the default sizes (128x128 images, 128^3 voxels) and
prints per-layer output shapes, then a reduced configuration for CPU work.
"""
import torch

from sist.nets import NetConfig, SISTNetworks, VoxelDecoder, layer_shapes

cfg = NetConfig()
nets = SISTNetworks(cfg).eval()
img = torch.zeros(1, 3, 128, 128)

with torch.no_grad():
    tables = {
        "generator": layer_shapes(nets.generator, torch.zeros(1, 1, 128, 128), torch.zeros(1, cfg.za_dim)),
        "discriminator": layer_shapes(nets.discriminator, img),
        "viewpoint encoder": layer_shapes(nets.view_encoder, img),
        "appearance encoder": layer_shapes(nets.appearance_encoder, img),
        "shape encoder": layer_shapes(nets.shape_encoder, img),
        "voxel decoder": layer_shapes(VoxelDecoder(cfg).eval(), torch.zeros(1, cfg.zs_dim)),
    }
for name, rows in tables.items():
    print(f"{name}:")
    for r in rows:
        print("   ", "x".join(map(str, r)))

n_params = {name: sum(p.numel() for p in getattr(nets, name).parameters()) for name in nets.NAMES}
print("parameters:", n_params)

# the implicit decoder evaluates any set of points; here a coarse-to-fine 64^3 grid
with torch.no_grad():
    probs = nets.decode_grid(torch.randn(1, cfg.zs_dim), 64, coarse=16)
print("decoded grid", tuple(probs.shape))
