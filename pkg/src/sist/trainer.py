"""Joint training of the image generator, encoders and shape decoder."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .datasets import (
    ImageDataset,
    PairedBatch,
    PairedSubset,
    ShapeDataset,
    UnpairedBatch,
    UnpairedBatcher,
    next_paired_batch,
)
from .geom3d import CameraModel, render_depth_batch, sample_viewpoint, viewpoint_to_raw
from .losses import (
    DivergenceError,
    LossWeights,
    PointSampler,
    cyclic_loss,
    implicit_shape_loss,
    kl_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    total_loss,
    voxel_shape_loss,
)
from .nets import NetConfig, SISTNetworks, VoxelDecoder

log = logging.getLogger(__name__)

GENERATOR_SIDE = ("generator", "view_encoder", "appearance_encoder", "shape_encoder", "shape_decoder")
LOG_FIELDS = ("step", "L_I_d", "L_I_g", "L_S", "L_C", "L_KL", "total")


def deterministic_mode() -> bool:
    return os.environ.get("SIST_DETERMINISTIC", "") == "1"


@dataclass
class TrainConfig:
    decoder_type: str = "implicit"
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.98
    label_flip_p: float = 0.05
    k_points: int = 1000
    epochs: int = 50
    max_steps: int | None = None
    supervision_rate: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)
    seed: int = 0
    checkpoint_every: int = 0
    gan_label_convention: str = "standard"
    deterministic: bool = False
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        self.adam_betas = tuple(self.adam_betas)
        # the decoder choice lives in one place
        self.net.decoder_type = self.decoder_type
        self.net.__post_init__()
        for name in ("batch_size", "lr", "lr_decay", "k_points", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.label_flip_p <= 1.0:
            raise ValueError("label_flip_p must lie in [0, 1]")
        if not 0.0 <= self.supervision_rate <= 1.0:
            raise ValueError("supervision_rate must lie in [0, 1]")
        if self.k_points % 4:
            raise ValueError("k_points must be divisible by 4")
        if self.gan_label_convention not in ("standard", "printed"):
            raise ValueError("gan_label_convention must be 'standard' or 'printed'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        """Hash of the settings that determine network shapes."""
        return hashlib.sha256(json.dumps(self.net.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def learning_rate(epoch: int, lr0: float = 1e-4, decay: float = 0.98) -> float:
    return lr0 * decay**epoch


def should_flip_labels(rng: np.random.Generator, p: float = 0.05) -> bool:
    return bool(rng.random() < p)


def images_to_tensor(images: np.ndarray, dtype) -> torch.Tensor:
    """(B, H, W, 3) array -> (B, 3, H, W) tensor."""
    return torch.as_tensor(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(dtype).contiguous()


class Trainer:
    """Owns networks, optimizers, RNG streams and the batch iterators."""

    def __init__(
        self,
        config: TrainConfig,
        shapes: ShapeDataset,
        images: ImageDataset,
        pairs: PairedSubset | None = None,
    ):
        self.config = config
        self.dtype = torch.float64 if (config.deterministic or deterministic_mode()) else torch.float32
        if shapes.resolution != config.net.voxel_res:
            raise ValueError(f"shape resolution {shapes.resolution} != configured voxel_res {config.net.voxel_res}")
        if images.images.shape[1] != config.net.image_size:
            raise ValueError(f"image size {images.images.shape[1]} != configured image_size {config.net.image_size}")
        torch.manual_seed(config.seed)
        self.nets = SISTNetworks(config.net).to(self.dtype)
        self.optimizers = {
            name: torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.adam_betas, eps=config.adam_eps)
            for name, net in self.nets.networks().items()
        }
        self.rng = np.random.default_rng(config.seed)
        self.torch_gen = torch.Generator().manual_seed(config.seed)
        self.camera = CameraModel.default(config.net.image_size)
        self.shapes = shapes
        self.images = images
        self.pairs = pairs if config.supervision_rate > 0 else None
        self.batcher = UnpairedBatcher(shapes, images, config.batch_size)
        self.step = 0
        self._samplers: dict[int, PointSampler] = {}

    # ------------------------------------------------------------ helpers

    @property
    def epoch(self) -> int:
        return self.batcher.epoch

    @property
    def is_voxel(self) -> bool:
        return isinstance(self.nets.shape_decoder, VoxelDecoder)

    def _sampler(self, occupancy: np.ndarray, key) -> PointSampler:
        if key not in self._samplers:
            self._samplers[key] = PointSampler(occupancy, str(key))
        return self._samplers[key]

    def _shape_loss(self, zs: torch.Tensor, occupancy: np.ndarray, keys) -> torch.Tensor:
        if self.is_voxel:
            probs = self.nets.shape_decoder(zs)
            return voxel_shape_loss(probs, torch.as_tensor(occupancy))
        k = self.config.k_points
        samples = [self._sampler(occ, key).sample(k, self.rng) for occ, key in zip(occupancy, keys)]
        coords = torch.as_tensor(np.stack([s.coords for s in samples]), dtype=self.dtype)
        targets = torch.as_tensor(np.stack([s.targets for s in samples]), dtype=self.dtype)
        return implicit_shape_loss(self.nets.shape_decoder(zs, coords), targets)

    def _set_lr(self):
        lr = learning_rate(self.epoch, self.config.lr, self.config.lr_decay)
        for opt in self.optimizers.values():
            for g in opt.param_groups:
                g["lr"] = lr
        return lr

    def parameter_norm(self) -> float:
        return float(sum(p.detach().double().pow(2).sum() for p in self.nets.parameters()) ** 0.5)

    # ------------------------------------------------------------ steps

    def self_supervised_step(self, batch: UnpairedBatch) -> dict:
        cfg, nets, w = self.config, self.nets, self.config.weights
        b = len(batch.shapes)
        views = [sample_viewpoint(self.rng) for _ in range(b)]
        depth = torch.as_tensor(render_depth_batch(batch.shapes, views, self.camera), dtype=self.dtype)[:, None]
        za = torch.randn(b, cfg.net.za_dim, generator=self.torch_gen, dtype=self.dtype)
        real = images_to_tensor(batch.images, self.dtype)
        flip = should_flip_labels(self.rng, cfg.label_flip_p)
        nets.train()

        fake = nets.generator(depth, za)

        disc = nets.discriminator
        self.optimizers["discriminator"].zero_grad(set_to_none=True)
        loss_d = lsgan_discriminator_loss(disc(real), disc(fake.detach()), flip, cfg.gan_label_convention)
        loss_d.backward()
        self.optimizers["discriminator"].step()

        for name in GENERATOR_SIDE:
            self.optimizers[name].zero_grad(set_to_none=True)
        disc.requires_grad_(False)
        try:
            loss_g = lsgan_generator_loss(disc(fake), cfg.gan_label_convention)
        finally:
            disc.requires_grad_(True)

        post_s = nets.shape_encoder(fake)
        zs = post_s.sample(self.torch_gen)
        keys = batch.shape_ids if batch.shape_ids is not None else range(b)
        loss_s = self._shape_loss(zs, batch.shapes, keys)

        kl = kl_loss(post_s, w.shape_kl)
        za_hat = za
        if w.appearance > 0:
            post_a = nets.appearance_encoder(fake)
            za_hat = post_a.mean
            kl = kl + kl_loss(post_a, w.appearance_kl)
        raw = torch.as_tensor(
            np.stack(viewpoint_to_raw([v.azimuth for v in views], [v.elevation for v in views]), 1), dtype=self.dtype
        )
        view_hat = nets.view_encoder(fake) if w.view > 0 else raw
        loss_c = cyclic_loss(za_hat, za, view_hat, raw, w)
        total = total_loss(loss_g, loss_s, loss_c, kl, w)

        record = {
            "step": self.step,
            "L_I_d": loss_d.item(),
            "L_I_g": loss_g.item(),
            "L_S": loss_s.item(),
            "L_C": loss_c.item(),
            "L_KL": kl.item(),
            "total": total.item(),
        }
        if not math.isfinite(record["total"]):
            raise DivergenceError(
                f"non-finite total loss at step {self.step}: {record}, parameter norm {self.parameter_norm():.4g}"
            )
        total.backward()
        for name in GENERATOR_SIDE:
            self.optimizers[name].step()
        return record

    def weak_supervision_step(self, batch: PairedBatch) -> float:
        """Update only the shape encoder and decoder on real paired images."""
        if self.config.supervision_rate <= 0 or self.pairs is None:
            raise ValueError("weak supervision requires supervision_rate > 0 and a paired subset")
        self.nets.train()
        for name in ("shape_encoder", "shape_decoder"):
            self.optimizers[name].zero_grad(set_to_none=True)
        real = images_to_tensor(batch.images, self.dtype)
        zs = self.nets.shape_encoder(real).sample(self.torch_gen)
        keys = [("pair", sid) for _, sid in batch.pairs] if batch.pairs else range(len(batch.shapes))
        loss = self._shape_loss(zs, batch.shapes, keys)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite weak-supervision loss at step {self.step}")
        loss.backward()
        for name in ("shape_encoder", "shape_decoder"):
            self.optimizers[name].step()
        return loss.item()

    def train_step(self) -> dict:
        """One iteration: self-supervised stage, then the paired stage when enabled."""
        batch = self.batcher.next(self.rng)
        lr = self._set_lr()  # after the draw, so the first step of a new pass uses the decayed rate
        record = self.self_supervised_step(batch)
        if self.pairs is not None:
            paired = next_paired_batch(self.pairs, self.config.batch_size, self.rng)
            record["L_S_weak"] = self.weak_supervision_step(paired)
        record["epoch"] = self.epoch
        record["lr"] = lr
        self.step += 1
        return record

    # ------------------------------------------------------------ checkpoints

    def save_checkpoint(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {
            "step": self.step,
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "dtype": str(self.dtype).replace("torch.", ""),
            "networks": {},
        }
        for name, net in self.nets.networks().items():
            torch.save(net.state_dict(), d / f"{name}.pt")
            torch.save(self.optimizers[name].state_dict(), d / f"{name}.optim.pt")
            manifest["networks"][name] = {
                "file": f"{name}.pt",
                "layer_shapes": {k: list(v.shape) for k, v in net.state_dict().items()},
            }
        torch.save(
            {
                "numpy": self.rng.bit_generator.state,
                "torch": self.torch_gen.get_state(),
                "batcher": self.batcher.state_dict(),
            },
            d / "state.pt",
        )
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return d

    def load_checkpoint(self, directory) -> None:
        d = Path(directory)
        manifest = read_manifest(d)
        if manifest["config_hash"] != self.config.hash():
            raise ValueError(f"checkpoint {d} was written for a different network configuration")
        for name, net in self.nets.networks().items():
            net.load_state_dict(torch.load(d / f"{name}.pt", weights_only=True))
            self.optimizers[name].load_state_dict(torch.load(d / f"{name}.optim.pt", weights_only=True))
        state = torch.load(d / "state.pt", weights_only=False)
        self.rng.bit_generator.state = state["numpy"]
        self.torch_gen.set_state(state["torch"])
        self.batcher.load_state_dict(state["batcher"])
        self.step = manifest["step"]


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_networks(directory, dtype=None) -> tuple[SISTNetworks, TrainConfig]:
    """Rebuild networks from a checkpoint directory, verifying the manifest."""
    d = Path(directory)
    manifest = read_manifest(d)
    config = TrainConfig.from_dict(manifest["config"])
    if config.hash() != manifest["config_hash"]:
        raise ValueError(f"checkpoint {d}: config hash does not match its manifest")
    if dtype is None:
        dtype = torch.float64 if manifest.get("dtype") == "float64" else torch.float32
    nets = SISTNetworks(config.net).to(dtype)
    for name, net in nets.networks().items():
        state = torch.load(d / manifest["networks"][name]["file"], weights_only=True)
        expected = manifest["networks"][name]["layer_shapes"]
        got = {k: list(v.shape) for k, v in state.items()}
        if got != expected:
            raise ValueError(f"checkpoint {d}: {name} tensors do not match the manifest")
        net.load_state_dict(state)
    nets.eval()
    return nets, config


def latest_checkpoint(out_dir) -> Path | None:
    ckpts = sorted(Path(out_dir, "checkpoints").glob("step_*"))
    ckpts = [c for c in ckpts if (c / "manifest.json").exists()]
    return ckpts[-1] if ckpts else None


def run_training(
    config: TrainConfig,
    shapes: ShapeDataset,
    images: ImageDataset,
    pairs: PairedSubset | None = None,
    out_dir=None,
    resume: bool = True,
    callback=None,
) -> Trainer:
    """Train for ``config.epochs`` passes over the images (or ``max_steps`` iterations).

    With ``out_dir`` set, loss records are appended to ``losses.jsonl`` and
    checkpoints are written to ``checkpoints/step_XXXXXXXX`` every
    ``checkpoint_every`` steps and at the end. Training resumes from the latest
    checkpoint found there.
    """
    if config.supervision_rate > 0 and (pairs is None or len(pairs) == 0):
        raise ValueError("supervision_rate > 0 requires a non-empty paired subset")
    trainer = Trainer(config, shapes, images, pairs)
    total_steps = config.max_steps or config.epochs * trainer.batcher.batches_per_epoch
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = latest_checkpoint(out_dir) if resume else None
        if ckpt is not None:
            trainer.load_checkpoint(ckpt)
            log.info("resumed from %s at step %d", ckpt, trainer.step)
            _truncate_log(out_dir / "losses.jsonl", trainer.step)
        log_file = open(out_dir / "losses.jsonl", "a")
    try:
        while trainer.step < total_steps:
            record = trainer.train_step()
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if callback is not None:
                callback(trainer, record)
            if out_dir is not None and config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
                trainer.save_checkpoint(out_dir / "checkpoints" / f"step_{trainer.step:08d}")
        if out_dir is not None:
            trainer.save_checkpoint(out_dir / "checkpoints" / f"step_{trainer.step:08d}")
    finally:
        if log_file is not None:
            log_file.close()
    return trainer


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] < step]
    path.write_text("".join(ln + "\n" for ln in keep))
