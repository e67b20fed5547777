"""
Loss terms and implicit-field point sampling
============================================

Each loss is a plain function of tensors. The implicit decoder is trained on
K points per shape: half near the surface, a quarter inside, a quarter outside.
"""
import numpy as np
import torch

from sist.losses import (
    NEGATIVE,
    POSITIVE,
    SURFACE,
    LossWeights,
    cyclic_loss,
    kl_divergence,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    sample_training_points,
    voxel_shape_loss,
)
from sist.nets import GaussianPosterior
from sist.toy import toy_shapes

# least-squares adversarial terms: D pushes real scores to 1 and fakes to 0
real, fake = torch.full((2, 1, 16, 16), 0.9), torch.full((2, 1, 16, 16), 0.2)
print("D loss", lsgan_discriminator_loss(real, fake).item(), "flipped", lsgan_discriminator_loss(real, fake, flip=True).item())
print("G loss", lsgan_generator_loss(fake).item())

# the cyclic loss wraps azimuth, so -179 and +179 degrees are 2 degrees apart
w = LossWeights()
za = torch.zeros(1, 16)
v_true = torch.tensor([[179 / 180, 0.0]])
v_est = torch.tensor([[-179 / 180, 0.0]])
print("cyclic loss across the seam", cyclic_loss(za, za, v_est, v_true, w).item())

# closed-form KL to N(0, I)
post = GaussianPosterior(torch.tensor([[1.0, 0.0]]), torch.zeros(1, 2))
print("KL per dimension", kl_divergence(post).tolist())

# voxel BCE against a toy shape
occ = toy_shapes(16).by_id("car").occupancy
probs = torch.full((1, 16, 16, 16), 0.5)
print("voxel BCE at p=0.5", voxel_shape_loss(probs, torch.as_tensor(occ[None].copy())).item())

batch = sample_training_points(occ, 1000, np.random.default_rng(0))
for name, tag in (("surface", SURFACE), ("inside", POSITIVE), ("outside", NEGATIVE)):
    print(f"{name:8s} {(batch.tags == tag).sum():4d} points")
