import math

import pytest
import torch

from sist.nets import (
    GaussianPosterior,
    ImageGenerator,
    ImplicitDecoder,
    NetConfig,
    PatchDiscriminator,
    SISTNetworks,
    VoxelDecoder,
    decode_implicit_grid,
    grid_points,
    layer_shapes,
)

from oracles import finite_difference_check

D = torch.float64
SMALL = NetConfig(
    image_size=16, voxel_res=16, za_dim=4, zs_dim=8, gen_width=4, disc_width=4, enc_width=4, dec_width=8,
    implicit_hidden=(16, 8),
)


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(image_size=100)
    with pytest.raises(ValueError):
        NetConfig(voxel_res=8)
    with pytest.raises(ValueError):
        NetConfig(decoder_type="mesh")


def test_generator_code_conv_equals_concatenation():
    torch.manual_seed(0)
    g = ImageGenerator(NetConfig(image_size=32, gen_width=4)).to(D)
    depth = torch.rand(3, 1, 32, 32, dtype=D) * 2 - 1
    za = torch.randn(3, 16, dtype=D)
    torch.testing.assert_close(g(depth, za), g(depth, za, concat=True), atol=1e-12, rtol=0)


def test_generator_conditioning_is_live():
    torch.manual_seed(1)
    g = ImageGenerator(SMALL).eval()
    depth = torch.rand(1, 1, 16, 16) * 2 - 1
    a = g(depth, torch.randn(1, 4))
    b = g(depth, torch.randn(1, 4))
    assert (a - b).abs().max() > 0
    assert a.min() >= -1 and a.max() <= 1


def test_posterior_sampling():
    post = GaussianPosterior(torch.zeros(20000, 2, dtype=D), torch.full((20000, 2), math.log(4.0), dtype=D))
    s = post.sample(torch.Generator().manual_seed(0))
    assert s.std().item() == pytest.approx(2.0, rel=0.02)


def test_logvar_head_starts_near_zero():
    net = SISTNetworks(NetConfig(image_size=32, voxel_res=16, enc_width=8))
    post = net.shape_encoder(torch.rand(4, 3, 32, 32) * 2 - 1)
    assert post.logvar.abs().max() < 0.5


def test_view_encoder_angle_ranges():
    net = SISTNetworks(SMALL)
    raw = net.view_encoder(torch.rand(8, 3, 16, 16) * 2 - 1)
    assert raw.shape == (8, 2)
    th, ph = net.view_encoder.to_angles(raw)
    assert (th.abs() < math.pi).all() and (ph > 0).all() and (ph < math.pi / 2).all()


def test_implicit_decoder_shapes_and_clamp(caplog):
    dec = ImplicitDecoder(SMALL)
    zs = torch.randn(2, 8)
    assert dec(zs, torch.rand(2, 5, 3)).shape == (2, 5)
    assert dec(zs, torch.rand(7, 3)).shape == (2, 7)
    out = dec(zs, torch.full((1, 3), 1.5))
    assert "clamped" in caplog.text
    torch.testing.assert_close(out, dec(zs, torch.ones(1, 3)))
    with pytest.raises(ValueError):
        dec(zs, torch.full((1, 3), float("nan")))


def test_grid_points_order():
    p = grid_points(4)
    assert p.shape == (64, 3)
    assert torch.allclose(p[1], torch.tensor([0.125, 0.125, 0.375]))


def test_coarse_to_fine_matches_dense_on_blob():
    torch.manual_seed(2)
    dec = ImplicitDecoder(SMALL).to(D)
    zs = torch.randn(1, 8, dtype=D)
    dense = decode_implicit_grid(dec, zs, 32)
    fast = decode_implicit_grid(dec, zs, 32, coarse=8)
    agree = ((dense >= 0.5) == (fast >= 0.5)).double().mean()
    assert agree > 0.99


def test_voxel_decoder_resolution_is_fixed():
    net = SISTNetworks(NetConfig(**{**SMALL.to_dict(), "decoder_type": "voxel"}))
    assert net.decode_grid(torch.randn(1, 8)).shape == (1, 16, 16, 16)
    with pytest.raises(ValueError, match="implicit"):
        net.decode_grid(torch.randn(1, 8), 32)
    imp = SISTNetworks(SMALL)
    assert imp.decode_grid(torch.randn(1, 8), 24).shape == (1, 24, 24, 24)


def test_reduced_configs_scale():
    cfg = NetConfig(image_size=64, voxel_res=32, gen_width=8, disc_width=8, enc_width=8, dec_width=32)
    net = SISTNetworks(cfg)
    assert layer_shapes(net.discriminator, torch.zeros(1, 3, 64, 64))[-1] == (1, 8, 8)
    assert layer_shapes(net.view_encoder, torch.zeros(1, 3, 64, 64))[-1] == (2, 1, 1)
    vd = VoxelDecoder(cfg)
    assert layer_shapes(vd, torch.zeros(1, 128))[-1] == (1, 32, 32, 32)


def _probe(net, inputs):
    def fn():
        out = net(*inputs)
        if isinstance(out, GaussianPosterior):
            out = torch.cat([out.mean, out.logvar], 1)
        w = torch.linspace(-1, 1, out.numel(), dtype=D).reshape(out.shape)
        return (out * w).sum()

    return fn


@pytest.mark.parametrize(
    "name", ["generator", "discriminator", "view_encoder", "appearance_encoder", "shape_encoder", "voxel", "implicit"]
)
def test_network_gradients_match_finite_differences(name):
    torch.manual_seed(3)
    cfg = NetConfig(**{**SMALL.to_dict(), "decoder_type": "voxel" if name == "voxel" else "implicit"})
    nets = SISTNetworks(cfg).to(D).train()
    img = torch.rand(2, 3, 16, 16, dtype=D) * 2 - 1
    inputs = {
        "generator": (torch.rand(2, 1, 16, 16, dtype=D) * 2 - 1, torch.randn(2, 4, dtype=D)),
        "discriminator": (img,),
        "view_encoder": (img,),
        "appearance_encoder": (img,),
        "shape_encoder": (img,),
        "voxel": (torch.randn(2, 8, dtype=D),),
        "implicit": (torch.randn(2, 8, dtype=D), torch.rand(2, 10, 3, dtype=D)),
    }[name]
    net = nets.shape_decoder if name in ("voxel", "implicit") else getattr(nets, name)
    params = [p for p in net.parameters() if p.requires_grad]
    assert finite_difference_check(_probe(net, inputs), params, n_probe=3) < 1e-3
