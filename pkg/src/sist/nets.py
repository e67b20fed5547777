"""Trainable networks: image generator/discriminator, encoders and shape decoders.

Default widths and sizes reproduce the published architecture tables
(128x128 images, 128^3 voxels). Smaller ``NetConfig`` values scale every
channel count proportionally and adjust the number of stride-2 stages to the
input/output size, which is what the toy and gradient-check configurations use.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

__all__ = [
    "NetConfig",
    "GaussianPosterior",
    "ImageGenerator",
    "PatchDiscriminator",
    "ViewpointEncoder",
    "GaussianEncoder",
    "VoxelDecoder",
    "ImplicitDecoder",
    "SISTNetworks",
    "layer_shapes",
    "init_weights",
]


@dataclass
class NetConfig:
    image_size: int = 128
    voxel_res: int = 128
    za_dim: int = 16
    zs_dim: int = 128
    gen_width: int = 64
    disc_width: int = 64
    enc_width: int = 32
    dec_width: int = 512
    implicit_hidden: tuple[int, ...] = (1024, 512, 256, 128)
    decoder_type: str = "implicit"

    def __post_init__(self):
        self.implicit_hidden = tuple(self.implicit_hidden)
        if self.decoder_type not in ("voxel", "implicit"):
            raise ValueError(f"decoder_type must be 'voxel' or 'implicit', got {self.decoder_type!r}")
        for name in ("image_size", "voxel_res"):
            v = getattr(self, name)
            if v < 16 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two >= 16, got {v}")

    def to_dict(self):
        return asdict(self)


@dataclass
class GaussianPosterior:
    mean: torch.Tensor
    logvar: torch.Tensor

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + torch.exp(0.5 * self.logvar) * eps


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Block(nn.Module):
    """conv -> optional batch norm -> activation; one architecture-table row."""

    def __init__(self, conv: nn.Module, out_ch: int, bn: bool, act: str | None, dims: int = 2):
        super().__init__()
        self.conv = conv
        self.norm = (nn.BatchNorm2d if dims == 2 else nn.BatchNorm3d)(out_ch) if bn else None
        self.act = act

    def forward(self, x):
        return self.post(self.conv(x))

    def post(self, x):
        if self.norm is not None:
            x = self.norm(x)
        if self.act == "relu":
            x = F.relu(x)
        elif self.act == "lrelu":
            x = F.leaky_relu(x, 0.2)
        elif self.act == "tanh":
            x = torch.tanh(x)
        elif self.act == "sigmoid":
            x = torch.sigmoid(x)
        return x


def _tile(code: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return code[:, :, None, None].expand(-1, -1, like.shape[2], like.shape[3])


class CodeConv2d(nn.Conv2d):
    """Conv over ``cat([features, tile(code)])`` without materialising the tiled code.

    The weight spans the full concatenated input. Code channels are spatially
    constant, so their contribution is the code projected through each kernel
    tap and convolved with an all-ones map, which reproduces the explicit
    concatenation exactly, zero-padded borders included.
    """

    def __init__(self, feat_ch: int, code_ch: int, out_ch: int, kernel: int, stride: int, padding: int):
        super().__init__(feat_ch + code_ch, out_ch, kernel, stride, padding)
        self.feat_ch = feat_ch

    def forward(self, h: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        w_feat, w_code = self.weight[:, : self.feat_ch], self.weight[:, self.feat_ch :]
        out = F.conv2d(h, w_feat, self.bias, self.stride, self.padding)
        b, o = code.shape[0], w_code.shape[0]
        taps = torch.einsum("bc,ockl->bokl", code, w_code).reshape(b * o, 1, *w_code.shape[2:])
        ones = h.new_ones(1, 1, h.shape[2], h.shape[3])
        return out + F.conv2d(ones, taps, None, self.stride, self.padding).reshape(b, o, *out.shape[2:])

    def forward_concat(self, h: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        return F.conv2d(torch.cat([h, _tile(code, h)], 1), self.weight, self.bias, self.stride, self.padding)


class CodeBlock(Block):
    """Block whose conv also receives the appearance code."""

    def forward(self, h, code, concat: bool = False):
        conv = self.conv.forward_concat if concat else self.conv
        return self.post(conv(h, code))


class ImageGenerator(nn.Module):
    """Depth map + appearance code -> RGB image in [-1, 1].

    Every conv sees the appearance code tiled over its input; the last one
    also sees the input depth map again.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w, za = cfg.gen_width, cfg.za_dim
        self.down = nn.ModuleList(
            [
                CodeBlock(CodeConv2d(1, za, w, 7, 1, 3), w, True, "relu"),
                CodeBlock(CodeConv2d(w, za, 2 * w, 4, 2, 1), 2 * w, True, "relu"),
                CodeBlock(CodeConv2d(2 * w, za, 4 * w, 4, 2, 1), 4 * w, True, "relu"),
                CodeBlock(CodeConv2d(4 * w, za, 8 * w, 4, 2, 1), 8 * w, True, "relu"),
            ]
        )
        self.up = nn.ModuleList(
            [
                CodeBlock(CodeConv2d(8 * w, za, 4 * w, 5, 1, 2), 4 * w, True, "relu"),
                CodeBlock(CodeConv2d(4 * w, za, 2 * w, 5, 1, 2), 2 * w, True, "relu"),
                CodeBlock(CodeConv2d(2 * w, za, w, 5, 1, 2), w, True, "relu"),
            ]
        )
        self.out = CodeBlock(CodeConv2d(w + 1, za, 3, 7, 1, 3), 3, False, "tanh")
        init_weights(self)

    def rows(self):
        return [*self.down, *self.up, self.out]

    def forward(self, depth: torch.Tensor, za: torch.Tensor, concat: bool = False) -> torch.Tensor:
        """``concat=True`` tiles the code explicitly; slower, numerically the same."""
        if depth.dim() == 3:
            depth = depth[:, None]
        h = depth
        for blk in self.down:
            h = blk(h, za, concat)
        for blk in self.up:
            h = blk(F.interpolate(h, scale_factor=2, mode="nearest"), za, concat)
        return self.out(torch.cat([h, depth], 1), za, concat)


def _same4(c_in: int, c_out: int) -> nn.Module:
    # stride-1 4x4 conv keeping the spatial size: pad 1 before, 2 after
    return nn.Sequential(nn.ZeroPad2d((1, 2, 1, 2)), nn.Conv2d(c_in, c_out, 4, 1, 0))


class PatchDiscriminator(nn.Module):
    """RGB image -> unbounded patch score map at 1/8 of the input size."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.disc_width
        self.layers = nn.ModuleList(
            [
                Block(nn.Conv2d(3, w, 4, 2, 1), w, False, "lrelu"),
                Block(nn.Conv2d(w, 2 * w, 4, 2, 1), 2 * w, False, "lrelu"),
                Block(nn.Conv2d(2 * w, 4 * w, 4, 2, 1), 4 * w, False, "lrelu"),
                Block(_same4(4 * w, 8 * w), 8 * w, False, "lrelu"),
                Block(_same4(8 * w, 1), 1, False, None),
            ]
        )
        init_weights(self)

    def rows(self):
        return list(self.layers)

    def forward(self, rgb):
        h = rgb
        for blk in self.layers:
            h = blk(h)
        return h


def _encoder_trunk(cfg: NetConfig) -> tuple[list[nn.Module], int]:
    n_down = int(math.log2(cfg.image_size // 4))
    layers, c_in = [], 3
    for i in range(n_down):
        c_out = cfg.enc_width * 2**i
        layers.append(Block(nn.Conv2d(c_in, c_out, 4, 2, 1), c_out, True, "relu"))
        c_in = c_out
    return layers, c_in


class ViewpointEncoder(nn.Module):
    """RGB image -> raw (azimuth, elevation) pair in (-1, 1)^2."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        trunk, c = _encoder_trunk(cfg)
        self.layers = nn.ModuleList([*trunk, Block(nn.Conv2d(c, 2, 4, 1, 0), 2, False, "tanh")])
        init_weights(self)

    def rows(self):
        return list(self.layers)

    def forward(self, rgb):
        h = rgb
        for blk in self.layers:
            h = blk(h)
        return h.flatten(1)

    @staticmethod
    def to_angles(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """theta = raw0 * pi, phi = (raw1 + 1) / 2 * pi/2."""
        return raw[:, 0] * math.pi, (raw[:, 1] + 1.0) / 2.0 * (math.pi / 2)


class GaussianEncoder(nn.Module):
    """RGB image -> diagonal Gaussian posterior (mean and log-variance heads)."""

    def __init__(self, cfg: NetConfig, code_dim: int):
        super().__init__()
        trunk, c = _encoder_trunk(cfg)
        self.layers = nn.ModuleList([*trunk, Block(nn.Conv2d(c, c, 4, 1, 0), c, False, "relu")])
        self.fc = nn.Linear(c, 2 * code_dim)
        self.code_dim = code_dim
        init_weights(self)

    def rows(self):
        return [*self.layers, self.fc]

    def forward(self, rgb) -> GaussianPosterior:
        h = rgb
        for blk in self.layers:
            h = blk(h)
        out = self.fc(h.flatten(1))
        return GaussianPosterior(out[:, : self.code_dim], out[:, self.code_dim :])


class VoxelDecoder(nn.Module):
    """Shape code -> occupancy probabilities (B, R, R, R)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        n_up = int(math.log2(cfg.voxel_res // 4))
        c = cfg.dec_width
        layers = [Block(nn.ConvTranspose3d(cfg.zs_dim, c, 4, 1, 0), c, False, "relu", dims=3)]
        for _ in range(n_up - 1):
            layers.append(Block(nn.ConvTranspose3d(c, c // 2, 4, 2, 1), c // 2, True, "relu", dims=3))
            c //= 2
        layers.append(Block(nn.ConvTranspose3d(c, 1, 4, 2, 1), 1, False, "sigmoid", dims=3))
        self.layers = nn.ModuleList(layers)
        self.resolution = cfg.voxel_res
        init_weights(self)

    def rows(self):
        return list(self.layers)

    def forward(self, zs):
        h = zs[:, :, None, None, None]
        for blk in self.layers:
            h = blk(h)
        return h[:, 0]


class ImplicitDecoder(nn.Module):
    """(shape code, query points in [0,1]^3) -> occupancy probability per point."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        dims = [cfg.zs_dim + 3, *cfg.implicit_hidden]
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], 1)
        self.zs_dim = cfg.zs_dim
        # the N(0, 0.02) GAN init starves a deep MLP of signal, so keep torch's fan-in scaled
        # default, but scale the coordinate columns by their own fan-in (3) so that the
        # position signal is not drowned by the 128-d code at the start of training
        with torch.no_grad():
            bound = 1.0 / math.sqrt(3.0)
            self.hidden[0].weight[:, cfg.zs_dim :].uniform_(-bound, bound)

    def rows(self):
        return [*self.hidden, self.out]

    def forward(self, zs: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        """``zs`` (B, Z); ``points`` (B, N, 3) or shared (N, 3). Returns (B, N)."""
        if points.dim() == 2:
            points = points[None].expand(zs.shape[0], -1, -1)
        if not torch.isfinite(points).all():
            raise ValueError("query points must be finite")
        if (points < 0).any() or (points > 1).any():
            log.warning("query points outside [0, 1]^3 clamped")
            points = points.clamp(0.0, 1.0)
        # first layer split into code and coordinate parts so the code term is computed once per shape;
        # coordinates enter centred on the cube so that no corner is favoured at initialization
        first = self.hidden[0]
        h = (zs @ first.weight[:, : self.zs_dim].T)[:, None, :] + (points - 0.5) @ first.weight[:, self.zs_dim :].T
        h = F.leaky_relu(h + first.bias, 0.02)
        for lin in self.hidden[1:]:
            h = F.leaky_relu(lin(h), 0.02)
        return torch.sigmoid(self.out(h))[..., 0]


def grid_points(resolution: int, dtype=torch.float32) -> torch.Tensor:
    """Cell-centre coordinates of a resolution^3 grid in [0,1]^3, x-major order."""
    c = (torch.arange(resolution, dtype=dtype) + 0.5) / resolution
    g = torch.stack(torch.meshgrid(c, c, c, indexing="ij"), -1)
    return g.reshape(-1, 3)


@torch.no_grad()
def decode_implicit_grid(
    decoder: ImplicitDecoder, zs: torch.Tensor, resolution: int, chunk: int = 1 << 16, coarse: int | None = None
) -> torch.Tensor:
    """Evaluate the field at every cell centre; returns probabilities (B, R, R, R).

    With ``coarse`` set, the field is evaluated densely at that resolution and
    then refined by successive doubling, re-evaluating only cells adjacent to
    an occupancy change; other cells inherit the coarse probability.
    """
    dtype = zs.dtype
    if coarse is None or coarse >= resolution:
        pts = grid_points(resolution, dtype)
        out = torch.cat([decoder(zs, pts[i : i + chunk]) for i in range(0, len(pts), chunk)], 1)
        return out.reshape(zs.shape[0], resolution, resolution, resolution)
    results = []
    for b in range(zs.shape[0]):
        z = zs[b : b + 1]
        res = coarse
        probs = decode_implicit_grid(decoder, z, res, chunk)[0]
        while res < resolution:
            occ = probs >= 0.5
            # cells whose 3x3x3 neighbourhood is mixed sit near the surface
            f = occ.to(dtype)[None, None]
            mx = F.max_pool3d(f, 3, 1, 1)[0, 0]
            mn = -F.max_pool3d(-f, 3, 1, 1)[0, 0]
            boundary = mx != mn
            res *= 2
            probs = probs.repeat_interleave(2, 0).repeat_interleave(2, 1).repeat_interleave(2, 2)
            boundary = boundary.repeat_interleave(2, 0).repeat_interleave(2, 1).repeat_interleave(2, 2)
            idx = boundary.nonzero()
            if len(idx):
                pts = (idx.to(dtype) + 0.5) / res
                vals = torch.cat([decoder(z, pts[i : i + chunk])[0] for i in range(0, len(pts), chunk)])
                probs[idx[:, 0], idx[:, 1], idx[:, 2]] = vals
        results.append(probs)
    return torch.stack(results)


class SISTNetworks(nn.Module):
    NAMES = ("generator", "discriminator", "view_encoder", "appearance_encoder", "shape_encoder", "shape_decoder")

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.generator = ImageGenerator(cfg)
        self.discriminator = PatchDiscriminator(cfg)
        self.view_encoder = ViewpointEncoder(cfg)
        self.appearance_encoder = GaussianEncoder(cfg, cfg.za_dim)
        self.shape_encoder = GaussianEncoder(cfg, cfg.zs_dim)
        self.shape_decoder = VoxelDecoder(cfg) if cfg.decoder_type == "voxel" else ImplicitDecoder(cfg)

    def networks(self) -> dict[str, nn.Module]:
        return {n: getattr(self, n) for n in self.NAMES}

    def decode_grid(self, zs: torch.Tensor, resolution: int | None = None, coarse: int | None = None) -> torch.Tensor:
        """Occupancy probabilities (B, R, R, R) from shape codes."""
        if isinstance(self.shape_decoder, VoxelDecoder):
            native = self.shape_decoder.resolution
            if resolution not in (None, native):
                raise ValueError(
                    f"voxel decoder produces a fixed {native}^3 grid; resolution {resolution} needs the implicit decoder"
                )
            return self.shape_decoder(zs)
        return decode_implicit_grid(self.shape_decoder, zs, resolution or self.cfg.voxel_res, coarse=coarse)


def layer_shapes(net: nn.Module, *inputs) -> list[tuple[int, ...]]:
    """Per-row output shapes (without the batch dimension) from one forward pass."""
    shapes: list[tuple[int, ...]] = []
    hooks = [m.register_forward_hook(lambda _m, _i, o: shapes.append(tuple(o.shape[1:]))) for m in net.rows()]
    try:
        if isinstance(net, ImplicitDecoder):
            # the first hidden layer is applied by hand, so trace it explicitly
            zs, pts = inputs
            h = torch.cat([zs[:, None, :].expand(-1, pts.shape[-2], -1), pts.expand(zs.shape[0], -1, -1)], -1)
            for lin in net.hidden:
                h = F.leaky_relu(lin(h), 0.02)
            torch.sigmoid(net.out(h))
        else:
            net(*inputs)
    finally:
        for h in hooks:
            h.remove()
    return shapes
