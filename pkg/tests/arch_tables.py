"""Per-row output sizes of the published architecture tables, channel-first, no batch dim."""

GENERATOR = [
    (64, 128, 128),
    (128, 64, 64),
    (256, 32, 32),
    (512, 16, 16),
    (256, 32, 32),
    (128, 64, 64),
    (64, 128, 128),
    (3, 128, 128),
]
DISCRIMINATOR = [(64, 64, 64), (128, 32, 32), (256, 16, 16), (512, 16, 16), (1, 16, 16)]
_TRUNK = [(32, 64, 64), (64, 32, 32), (128, 16, 16), (256, 8, 8), (512, 4, 4)]
VIEW_ENCODER = [*_TRUNK, (2, 1, 1)]
APPEARANCE_ENCODER = [*_TRUNK, (512, 1, 1), (2 * 16,)]
SHAPE_ENCODER = [*_TRUNK, (512, 1, 1), (2 * 128,)]
VOXEL_DECODER = [
    (512, 4, 4, 4),
    (256, 8, 8, 8),
    (128, 16, 16, 16),
    (64, 32, 32, 32),
    (32, 64, 64, 64),
    (1, 128, 128, 128),
]
