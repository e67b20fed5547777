"""Adversarial, reconstruction, cycle and KL objectives plus the point sampler."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .geom3d import VoxelGrid
from .nets import GaussianPosterior

BCE_EPS = 1e-7

SURFACE, POSITIVE, NEGATIVE = 0, 1, 2


class DivergenceError(FloatingPointError):
    """Raised when a loss becomes non-finite."""


@dataclass
class LossWeights:
    image: float = 0.005  # lambda_I
    shape: float = 100.0  # lambda_S
    view: float = 10.0  # lambda_V
    appearance: float = 10.0  # lambda_A
    shape_kl: float = 0.001
    appearance_kl: float = 0.001

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise DivergenceError("non-finite discriminator scores")


def _gan_targets(convention: str, flip: bool) -> tuple[float, float]:
    if convention == "standard":
        real, fake = 1.0, 0.0
    elif convention == "printed":
        real, fake = 0.0, 1.0
    else:
        raise ValueError(f"unknown gan label convention {convention!r}")
    return (fake, real) if flip else (real, fake)


def lsgan_discriminator_loss(scores_real, scores_fake, flip: bool = False, convention: str = "standard"):
    """Least-squares discriminator loss; ``flip`` swaps the real/fake targets for this step."""
    _check_finite(scores_real, scores_fake)
    t_real, t_fake = _gan_targets(convention, flip)
    return ((scores_real - t_real) ** 2).mean() + ((scores_fake - t_fake) ** 2).mean()


def lsgan_generator_loss(scores_fake, convention: str = "standard"):
    _check_finite(scores_fake)
    t_real, _ = _gan_targets(convention, False)
    return ((scores_fake - t_real) ** 2).mean()


def binary_cross_entropy(probs, targets):
    p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)
    t = targets.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def voxel_shape_loss(probs, target):
    """Mean BCE over every cell of the predicted occupancy grid."""
    if isinstance(target, VoxelGrid):
        target = torch.as_tensor(target.occupancy)
    target = torch.as_tensor(target, device=probs.device)
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: predicted {tuple(probs.shape)} vs target {tuple(target.shape)}")
    return binary_cross_entropy(probs, target)


def implicit_shape_loss(outputs, targets):
    """Mean BCE over the sampled query points."""
    targets = torch.as_tensor(targets, device=outputs.device)
    if outputs.shape != targets.shape:
        raise ValueError(f"shape mismatch: outputs {tuple(outputs.shape)} vs targets {tuple(targets.shape)}")
    return binary_cross_entropy(outputs, targets)


def wrap_raw_azimuth(d):
    """Wrap a difference of raw azimuths (theta / pi) into [-1, 1]."""
    return d - 2.0 * torch.round(d / 2.0)


def cyclic_loss(za_hat, za, view_hat_raw, view_raw, weights: LossWeights):
    """Weighted L1 between recovered and generating codes.

    Viewpoints are compared in the encoder's raw tanh space, azimuth with wraparound.
    """
    loss = za_hat.new_zeros(())
    if weights.appearance:
        loss = loss + weights.appearance * (za_hat - za).abs().mean()
    if weights.view:
        d_az = wrap_raw_azimuth(view_hat_raw[:, 0] - view_raw[:, 0]).abs()
        d_el = (view_hat_raw[:, 1] - view_raw[:, 1]).abs()
        loss = loss + weights.view * torch.cat([d_az, d_el]).mean()
    return loss


def kl_divergence(posterior: GaussianPosterior):
    """Per-dimension KL to the standard normal prior."""
    mu, lv = posterior.mean, posterior.logvar
    return 0.5 * (mu**2 + torch.exp(lv) - 1.0 - lv)


def kl_loss(posterior: GaussianPosterior, weight: float = 1.0):
    return weight * kl_divergence(posterior).mean()


def total_loss(image, shape, cyclic, kl, weights: LossWeights):
    """lambda_I * L_I + lambda_S * L_S + L_C + L_KL (the last two carry their own weights)."""
    return weights.image * image + weights.shape * shape + cyclic + kl


# ---------------------------------------------------------------- point sampling


@dataclass
class PointSampleBatch:
    coords: np.ndarray  # (K, 3) in [0, 1]^3
    targets: np.ndarray  # (K,) in {0, 1}
    tags: np.ndarray  # (K,) SURFACE / POSITIVE / NEGATIVE


def surface_cells(occupancy: np.ndarray) -> np.ndarray:
    """Occupied cells with at least one empty 6-neighbour; outside the grid counts as empty."""
    occ = np.asarray(occupancy, bool)
    p = np.pad(occ, 1, constant_values=False)
    interior = (
        p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1] & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:]
    )
    return occ & ~interior


class PointSampler:
    """Precomputed cell lists for repeated sampling from one grid."""

    def __init__(self, occupancy: np.ndarray, grid_id: str | None = None):
        occ = np.asarray(occupancy, bool)
        self.resolution = occ.shape[0]
        self.occupied = np.argwhere(occ)
        self.empty = np.argwhere(~occ)
        if len(self.occupied) == 0 or len(self.empty) == 0:
            kind = "empty" if len(self.occupied) == 0 else "fully occupied"
            raise ValueError(f"cannot sample training points from {kind} grid {grid_id or '<unnamed>'}")
        self.surface = np.argwhere(surface_cells(occ))

    def sample(self, k: int, rng: np.random.Generator) -> PointSampleBatch:
        if k % 4:
            raise ValueError(f"K must be divisible by 4, got {k}")
        half, quarter = k // 2, k // 4
        cells = np.concatenate(
            [
                self.surface[rng.integers(0, len(self.surface), half)],
                self.occupied[rng.integers(0, len(self.occupied), quarter)],
                self.empty[rng.integers(0, len(self.empty), quarter)],
            ]
        )
        coords = (cells + rng.random((k, 3))) / self.resolution
        targets = np.concatenate([np.ones(half + quarter), np.zeros(quarter)])
        tags = np.repeat(np.array([SURFACE, POSITIVE, NEGATIVE], np.int8), [half, quarter, quarter])
        return PointSampleBatch(coords, targets, tags)


def sample_training_points(target, k: int, rng: np.random.Generator, grid_id: str | None = None) -> PointSampleBatch:
    occ = target.occupancy if isinstance(target, VoxelGrid) else target
    return PointSampler(occ, grid_id).sample(k, rng)
