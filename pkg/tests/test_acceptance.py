"""The numbered acceptance criteria, each at its stated tolerance.

A summary line per criterion is printed at the end of the pytest run.
"""
import math
import time

import numpy as np
import pytest
import torch

from sist.apps import SISTModel
from sist.evalkit import chamfer_distance, iou, marching_cubes
from sist.geom3d import CameraModel, VoxelGrid, depth_quantum, pixel_rays, render_depth, sample_viewpoint
from sist.losses import (
    NEGATIVE,
    POSITIVE,
    SURFACE,
    LossWeights,
    cyclic_loss,
    implicit_shape_loss,
    kl_divergence,
    kl_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    sample_training_points,
    surface_cells,
    voxel_shape_loss,
)
from sist.nets import GaussianPosterior, NetConfig, SISTNetworks, VoxelDecoder, layer_shapes
from sist.toy import make_toy_data, toy_net_config, toy_azimuth_mae, toy_reconstruction_iou, toy_shapes, toy_train_config
from sist.trainer import Trainer, learning_rate, should_flip_labels

import arch_tables
from oracles import brute_force_chamfer, brute_force_depth, finite_difference_check, set_iou

D = torch.float64


def _detail(request, text):
    request.node.acceptance_detail = text


# ---------------------------------------------------------------- 1


@pytest.mark.acceptance(1, "metric oracle equivalence (CD, IoU)")
def test_c1_metric_oracles(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_cd = 0.0
    for _ in range(200):
        a = rng.normal(size=(rng.integers(1, 65), 3))
        b = rng.normal(size=(rng.integers(1, 65), 3))
        worst_cd = max(worst_cd, abs(chamfer_distance(a, b) - brute_force_chamfer(a, b)))
    iou_mismatch = 0
    for _ in range(200):
        pa, pb = rng.random(2)
        a = rng.random((16, 16, 16)) < pa
        b = rng.random((16, 16, 16)) < pb
        iou_mismatch += iou(a, b) != set_iou(a, b)
    cloud = rng.random((20, 3))
    grid = rng.random((16, 16, 16)) < 0.3
    two = np.zeros((16, 16, 16), bool)
    two[0, 0, 0] = two[0, 0, 1] = True
    one = np.zeros_like(two)
    one[0, 0, 0] = True
    elapsed = time.perf_counter() - t0
    _detail(request, f"max CD error {worst_cd:.1e}, IoU mismatches {iou_mismatch}, {elapsed:.1f} s")
    assert worst_cd < 1e-9
    assert iou_mismatch == 0
    assert chamfer_distance(cloud, cloud) == 0.0
    assert iou(grid, grid) == 1.0
    assert chamfer_distance([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]]) == 2.0
    assert iou(two, one) == 0.5
    assert elapsed < 10.0


# ---------------------------------------------------------------- 2


@pytest.mark.acceptance(2, "projection oracle (masks exact, depth within one voxel quantum)")
def test_c2_projection_oracle(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    cam = CameraModel.default(32)
    quantum = depth_quantum(cam, 16)
    dmin = cam.distance - math.sqrt(3) / 2
    span = math.sqrt(3)
    mask_errors, worst = 0, 0.0
    for _ in range(50):
        occ = rng.random((16, 16, 16)) < rng.uniform(0.02, 0.3)
        v = sample_viewpoint(rng)
        got = render_depth(VoxelGrid(occ), v, cam).values
        origin, dirs = pixel_rays(v, cam)
        t = brute_force_depth(occ, origin, dirs, -0.5, 1 / 16)
        ref_mask = np.isfinite(t)
        ref = np.where(ref_mask, 1.0 - 2.0 * (t - dmin) / span, -1.0)
        mask_errors += int(((got > -1) != ref_mask).sum())
        if ref_mask.any():
            worst = max(worst, float(np.abs(got - ref)[ref_mask].max()))
    elapsed = time.perf_counter() - t0
    _detail(request, f"mask mismatches {mask_errors}, max depth error {worst:.2e} (quantum {quantum:.3f}), {elapsed:.1f} s")
    assert mask_errors == 0
    assert worst <= quantum
    assert elapsed < 30.0


# ---------------------------------------------------------------- 3


SMALL = NetConfig(
    image_size=16, voxel_res=16, za_dim=4, zs_dim=8, gen_width=4, disc_width=4, enc_width=4, dec_width=8,
    implicit_hidden=(16, 8),
)


def _probe(net, inputs):
    def fn():
        out = net(*inputs)
        if isinstance(out, GaussianPosterior):
            out = torch.cat([out.mean, out.logvar], 1)
        w = torch.linspace(-1, 1, out.numel(), dtype=D).reshape(out.shape)
        return (out * w).sum()

    return fn


@pytest.mark.acceptance(3, "finite-difference gradient checks (losses and networks)")
def test_c3_gradient_checks(request):
    t0 = time.perf_counter()
    torch.manual_seed(3)
    errs = {}
    a = torch.randn(2, 1, 4, 4, dtype=D, requires_grad=True)
    b = torch.randn(2, 1, 4, 4, dtype=D, requires_grad=True)
    errs["adversarial_d"] = finite_difference_check(lambda: lsgan_discriminator_loss(a, b), [a, b])
    errs["adversarial_g"] = finite_difference_check(lambda: lsgan_generator_loss(b), [b])
    za_hat = torch.randn(3, 4, dtype=D, requires_grad=True)
    vh = (torch.rand(3, 2, dtype=D) * 1.6 - 0.8).requires_grad_()
    za, v = torch.randn(3, 4, dtype=D), torch.rand(3, 2, dtype=D) * 1.6 - 0.8
    errs["cyclic"] = finite_difference_check(lambda: cyclic_loss(za_hat, za, vh, v, LossWeights()), [za_hat, vh])
    mu = torch.randn(3, 5, dtype=D, requires_grad=True)
    lv = torch.randn(3, 5, dtype=D, requires_grad=True)
    errs["kl"] = finite_difference_check(lambda: kl_loss(GaussianPosterior(mu, lv), 0.5), [mu, lv])
    logits = torch.randn(2, 6, 6, 6, dtype=D, requires_grad=True)
    target = torch.rand(2, 6, 6, 6) > 0.5
    errs["voxel_bce"] = finite_difference_check(lambda: voxel_shape_loss(torch.sigmoid(logits), target), [logits])
    pl = torch.randn(2, 20, dtype=D, requires_grad=True)
    pt = (torch.rand(2, 20) > 0.5).to(D)
    errs["implicit_bce"] = finite_difference_check(lambda: implicit_shape_loss(torch.sigmoid(pl), pt), [pl])

    img = torch.rand(2, 3, 16, 16, dtype=D) * 2 - 1
    for dec in ("implicit", "voxel"):
        nets = SISTNetworks(NetConfig(**{**SMALL.to_dict(), "decoder_type": dec})).to(D).train()
        cases = {"shape_decoder_" + dec: (nets.shape_decoder, (torch.randn(2, 8, dtype=D),) if dec == "voxel"
                                          else (torch.randn(2, 8, dtype=D), torch.rand(2, 10, 3, dtype=D)))}
        if dec == "implicit":
            cases.update(
                generator=(nets.generator, (torch.rand(2, 1, 16, 16, dtype=D) * 2 - 1, torch.randn(2, 4, dtype=D))),
                discriminator=(nets.discriminator, (img,)),
                view_encoder=(nets.view_encoder, (img,)),
                appearance_encoder=(nets.appearance_encoder, (img,)),
                shape_encoder=(nets.shape_encoder, (img,)),
            )
        for name, (net, inputs) in cases.items():
            errs[name] = finite_difference_check(_probe(net, inputs), list(net.parameters()), n_probe=4)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    _detail(request, f"{len(errs)} checks, worst {worst} {errs[worst]:.1e}, {elapsed:.0f} s")
    assert all(e < 1e-3 for e in errs.values()), errs
    assert elapsed < 300


# ---------------------------------------------------------------- 4


@pytest.mark.acceptance(4, "KL closed form vs Monte Carlo")
def test_c4_kl_monte_carlo(request):
    gen = torch.Generator().manual_seed(4)
    worst = 0.0
    for _ in range(20):
        # 2-d posteriors around the prior; the MC standard error then stays near 1e-3
        mu = torch.randn(2, dtype=D, generator=gen)
        logvar = torch.empty(2, dtype=D).uniform_(-1.0, 1.0, generator=gen)
        closed = kl_divergence(GaussianPosterior(mu, logvar)).sum().item()
        sd = torch.exp(0.5 * logvar)
        z = mu + sd * torch.randn(1_000_000, 2, dtype=D, generator=gen)
        log_q = (-0.5 * ((z - mu) / sd) ** 2 - torch.log(sd)).sum(1)
        log_p = (-0.5 * z**2).sum(1)
        mc = (log_q - log_p).mean().item()
        worst = max(worst, abs(mc - closed))
    unit = kl_divergence(GaussianPosterior(torch.ones(1, dtype=D), torch.zeros(1, dtype=D))).item()
    _detail(request, f"max |MC - closed| {worst:.1e}, KL(mu=1, sigma=1) - 0.5 = {unit - 0.5:.1e}")
    assert worst < 1e-2
    assert abs(unit - 0.5) < 1e-12


# ---------------------------------------------------------------- 5


@pytest.mark.acceptance(5, "point-sampler composition")
def test_c5_point_sampler(request):
    rng = np.random.default_rng(5)
    grids = [g.occupancy for g in toy_shapes(32).grids]
    bad_counts, bad_surface = 0, 0
    for i in range(1000):
        occ = grids[i % len(grids)] if i % 2 else rng.random((16, 16, 16)) < rng.uniform(0.1, 0.6)
        batch = sample_training_points(occ, 1000, rng)
        counts = [int((batch.tags == t).sum()) for t in (SURFACE, POSITIVE, NEGATIVE)]
        bad_counts += counts != [500, 250, 250]
        res = occ.shape[0]
        cells = np.floor(batch.coords[batch.tags == SURFACE] * res).astype(int)
        bad_surface += int((~surface_cells(occ)[tuple(cells.T)]).sum())
    _detail(request, f"draws with wrong counts {bad_counts}, surface points without an empty neighbour {bad_surface}")
    assert bad_counts == 0 and bad_surface == 0


# ---------------------------------------------------------------- 6


@pytest.mark.acceptance(6, "architecture conformance at default sizes")
def test_c6_architecture(request):
    cfg = NetConfig()
    torch.manual_seed(6)
    with torch.no_grad():
        nets = SISTNetworks(cfg).eval()
        img = torch.rand(1, 3, 128, 128) * 2 - 1
        depth = torch.rand(1, 1, 128, 128) * 2 - 1
        got = {
            "generator": layer_shapes(nets.generator, depth, torch.randn(1, 16)),
            "discriminator": layer_shapes(nets.discriminator, img),
            "view_encoder": layer_shapes(nets.view_encoder, img),
            "appearance_encoder": layer_shapes(nets.appearance_encoder, img),
            "shape_encoder": layer_shapes(nets.shape_encoder, img),
            "voxel_decoder": layer_shapes(VoxelDecoder(cfg).eval(), torch.randn(1, 128)),
        }
        out = nets.generator(depth, torch.randn(1, 16))
    expected = {
        "generator": arch_tables.GENERATOR,
        "discriminator": arch_tables.DISCRIMINATOR,
        "view_encoder": arch_tables.VIEW_ENCODER,
        "appearance_encoder": arch_tables.APPEARANCE_ENCODER,
        "shape_encoder": arch_tables.SHAPE_ENCODER,
        "voxel_decoder": arch_tables.VOXEL_DECODER,
    }
    wrong = [k for k in expected if got[k] != expected[k]]
    _detail(request, f"mismatching networks: {wrong or 'none'}, generator range [{out.min():.2f}, {out.max():.2f}]")
    assert not wrong, {k: got[k] for k in wrong}
    assert out.min() >= -1 and out.max() <= 1
    assert got["discriminator"][-1] == (1, 16, 16)


# ---------------------------------------------------------------- 7


@pytest.mark.acceptance(7, "marching cubes on an analytic sphere and an empty grid")
def test_c7_marching_cubes(request):
    c = (np.arange(64) + 0.5) / 64 - 0.5
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    mesh = marching_cubes(x * x + y * y + z * z <= 0.35**2)
    err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.35).max() * 64
    empty = marching_cubes(np.zeros((64, 64, 64)))
    _detail(request, f"max radial error {err:.2f} voxel spacings over {len(mesh.vertices)} vertices")
    assert len(mesh.vertices) > 0 and err <= 1.5
    assert empty.is_empty and len(empty.vertices) == 0


# ---------------------------------------------------------------- 8


@pytest.mark.acceptance(8, "learning-rate schedule and label-flip rate")
def test_c8_schedule(request):
    targets = {0: 1e-4, 1: 9.8e-5, 10: 8.171e-5}
    errors = {e: abs(learning_rate(e) - t) for e, t in targets.items()}
    rng = np.random.default_rng(8)
    rate = np.mean([should_flip_labels(rng, 0.05) for _ in range(100_000)])
    _detail(
        request,
        "lr errors " + ", ".join(f"epoch {e}: {err:.1e}" for e, err in errors.items()) + f"; flip rate {rate:.4f}",
    )
    assert abs(rate - 0.05) <= 0.005
    assert all(err <= 1e-9 for err in errors.values()), errors


# ---------------------------------------------------------------- 9 / 10


class ToyRun:
    def __init__(self, decoder, supervision_rate=0.0):
        self.shapes, self.images, self.gt, pairs = make_toy_data(32, 64, supervision_rate=supervision_rate)
        cfg = toy_train_config(decoder, supervision_rate)
        t0 = time.perf_counter()
        trainer = Trainer(cfg, self.shapes, self.images, pairs)
        self.log = [trainer.train_step() for _ in range(cfg.max_steps)]
        self.seconds = time.perf_counter() - t0
        model = SISTModel(trainer.nets)
        held_in = self.shapes.ids[:5]
        self.iou = toy_reconstruction_iou(model, self.shapes, self.images, self.gt, held_in)
        self.mae = toy_azimuth_mae(model, self.shapes)

    @property
    def finite(self):
        keys = ("L_I_d", "L_I_g", "L_S", "L_C", "L_KL", "total")
        return all(math.isfinite(r[k]) for r in self.log for k in keys)

    @property
    def ls_start(self):
        return self.log[10]["L_S"]

    @property
    def ls_end(self):
        # mean of the final 50 steps; single-step values are noisy at this batch size
        return float(np.mean([r["L_S"] for r in self.log[-50:]]))


_RUNS: dict = {}


def _run(decoder, rate=0.0):
    key = (decoder, rate)
    if key not in _RUNS:
        _RUNS[key] = ToyRun(decoder, rate)
    return _RUNS[key]


@pytest.mark.acceptance(9, "toy end-to-end run, both decoders")
def test_c9_toy_end_to_end(request):
    runs = {d: _run(d) for d in ("implicit", "voxel")}
    total = sum(r.seconds for r in runs.values())
    parts = []
    for d, r in runs.items():
        parts.append(
            f"{d}: L_S {r.ls_start:.3f}->{r.ls_end:.3f} ({r.ls_end / r.ls_start:.0%}), IoU {r.iou:.3f}, "
            f"azimuth MAE {r.mae:.1f} deg, {r.seconds / 60:.1f} min"
        )
    _detail(request, "; ".join(parts))
    for d, r in runs.items():
        assert r.finite, f"{d}: non-finite loss"
        assert r.ls_end < 0.25 * r.ls_start, f"{d}: L_S end {r.ls_end:.4f} vs step-10 {r.ls_start:.4f}"
        assert r.iou >= 0.5, f"{d}: IoU {r.iou:.3f}"
        assert r.mae <= 15.0, f"{d}: azimuth MAE {r.mae:.1f}"
    assert total <= 45 * 60


@pytest.mark.acceptance(10, "weak supervision does not hurt toy reconstruction")
def test_c10_weak_supervision(request):
    base = _run("implicit")
    weak = _run("implicit", 0.25)
    _detail(request, f"IoU rate 0: {base.iou:.3f}, rate 0.25: {weak.iou:.3f}, {weak.seconds / 60:.1f} min")
    assert weak.iou >= base.iou
    assert weak.seconds <= 45 * 60


# ---------------------------------------------------------------- 11


@pytest.mark.acceptance(11, "checkpoint restore reproduces the next 50 steps bit-identically")
def test_c11_checkpoint_determinism(request, tmp_path):
    shapes, images, gt, pairs = make_toy_data(32, 64, per_shape=4, supervision_rate=0.25)
    cfg = toy_train_config(
        "implicit", 0.25, steps=80, deterministic=True, net=toy_net_config("implicit", implicit_hidden=(64, 32))
    )
    a = Trainer(cfg, shapes, images, pairs)
    for _ in range(30):
        a.train_step()
    a.save_checkpoint(tmp_path / "ck")
    ref = [a.train_step() for _ in range(50)]
    b = Trainer(cfg, shapes, images, pairs)
    b.load_checkpoint(tmp_path / "ck")
    again = [b.train_step() for _ in range(50)]
    same = sum(x == y for x, y in zip(ref, again))
    _detail(request, f"{same}/50 identical records, dtype {b.dtype}")
    assert b.dtype == torch.float64
    assert ref == again
