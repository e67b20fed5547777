"""``sist`` command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric divergence.
Angles on the command line are in degrees.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("sist")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- train


def _load_training_data(data: dict, config, root: Path):
    from .datasets import load_images, load_manifest, load_voxels, make_paired_subset
    from .toy import make_toy_data

    if "toy" in data:
        toy = dict(data["toy"])
        toy.setdefault("resolution", config.net.voxel_res)
        toy.setdefault("image_size", config.net.image_size)
        shapes, images, _, pairs = make_toy_data(supervision_rate=config.supervision_rate, seed=config.seed, **toy)
        return shapes, images, pairs
    if "manifest" in data:
        shapes, images, _, gt = load_manifest(root / data["manifest"], config.net.image_size, seed=config.seed)
    elif "shapes" in data and "images" in data:
        shapes = load_voxels(root / data["shapes"], data.get("shape_format", "raw-occupancy"))
        images, _ = load_images(root / data["images"], data.get("split_fraction", 0.75), config.seed, config.net.image_size)
        gt = {}
    else:
        raise UsageError("config 'data' needs one of: 'toy', 'manifest', or both 'shapes' and 'images'")
    pairs = make_paired_subset(images, shapes, gt, config.supervision_rate, config.seed) if config.supervision_rate > 0 else None
    return shapes, images, pairs


def cmd_train(args) -> int:
    from .trainer import TrainConfig, run_training

    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")
    data = raw.pop("data", None)
    out_dir = args.out or raw.pop("out_dir", None)
    raw.pop("out_dir", None)
    if data is None:
        raise UsageError("config has no 'data' section")
    if out_dir is None:
        raise UsageError("no output directory: pass --out or set 'out_dir' in the config")
    config = TrainConfig.from_dict(raw)
    if os.environ.get("SIST_DETERMINISTIC") == "1":
        config.deterministic = True
    shapes, images, pairs = _load_training_data(data, config, path.parent)
    trainer = run_training(config, shapes, images, pairs, out_dir=out_dir, resume=not args.no_resume)
    print(f"trained {trainer.step} steps; checkpoints in {Path(out_dir) / 'checkpoints'}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _voxel_files(d: Path) -> dict[str, Path]:
    from .datasets import VOXEL_READERS

    suffixes = {s for _, sfx in VOXEL_READERS.values() for s in sfx}
    if not d.is_dir():
        raise UsageError(f"{d} is not a directory")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix in suffixes}


def cmd_eval(args) -> int:
    from .datasets import read_voxel_file
    from .evalkit import evaluate_pair

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = set(metrics) - {"cd", "iou"}
    if bad or not metrics:
        raise UsageError(f"unknown metrics {sorted(bad)}; choose from cd, iou")
    pred, gt = _voxel_files(Path(args.pred)), _voxel_files(Path(args.gt))
    common = sorted(set(pred) & set(gt))
    if not common:
        raise UsageError("no shape IDs are present in both --pred and --gt")
    missing = sorted(set(gt) - set(pred))
    if missing:
        log.warning("%d ground-truth shapes have no prediction: %s", len(missing), ", ".join(missing[:10]))
    rng = np.random.default_rng(args.seed)
    rows = []
    for sid in common:
        res = evaluate_pair(read_voxel_file(pred[sid]), read_voxel_file(gt[sid]), metrics, args.points, rng, args.sampling)
        rows.append({"id": sid, **res})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["id", *metrics])
        w.writeheader()
        w.writerows(rows)
    summary = {"count": len(rows), "missing": missing}
    for m in metrics:
        vals = np.array([r[m] for r in rows], np.float64)
        summary[f"mean_{m}"] = float(np.nanmean(vals)) if np.isfinite(vals).any() else None
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------- applications


def _model(args, decoder: str | None = None):
    from .apps import SISTModel
    from .trainer import latest_checkpoint, read_manifest

    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").exists():
        # a training output directory: use its latest checkpoint
        ckpt = latest_checkpoint(ckpt) or ckpt
    manifest = read_manifest(ckpt)
    trained = manifest["config"]["decoder_type"]
    if decoder is not None and decoder != trained:
        raise UsageError(f"checkpoint {ckpt} holds a {trained} decoder, not {decoder}")
    return SISTModel.from_checkpoint(ckpt)


def _image(model, path):
    from .datasets import read_image

    return read_image(path, model.cfg.image_size)


def _shape(path):
    from .datasets import read_voxel_file

    return read_voxel_file(path)


def _out_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _parse_angles(text: str) -> list[float]:
    try:
        return [math.radians(float(t)) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"could not parse angle list {text!r}")


def cmd_reconstruct(args) -> int:
    from .datasets import write_raw_occupancy
    from .evalkit import write_obj

    model = _model(args, args.decoder)
    grid, mesh = model.reconstruct_shape(_image(model, args.image), args.resolution)
    out = _out_dir(args.out)
    stem = Path(args.image).stem
    write_obj(mesh, out / f"{stem}.obj")
    write_raw_occupancy(grid, out / f"{stem}.svox")
    print(f"{grid.resolution}^3 occupancy, {len(mesh.vertices)} vertices -> {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .datasets import write_image
    from .geom3d import Viewpoint

    model = _model(args)
    za = np.array(json.loads(args.za), np.float64) if args.za else None
    view = Viewpoint(math.radians(args.azimuth), math.radians(args.elevation))
    img = model.generate_image(_shape(args.shape), view, za, rng=args.seed)
    write_image(img, args.out)
    return EXIT_OK


def cmd_reconstruct_image(args) -> int:
    from .datasets import write_image

    model = _model(args)
    write_image(model.reconstruct_image(_image(model, args.image)), args.out)
    return EXIT_OK


def cmd_nvs(args) -> int:
    from .datasets import write_image

    model = _model(args)
    azimuths = _parse_angles(args.azimuths)
    if not azimuths:
        raise UsageError("--azimuths is empty")
    views = model.novel_views(_image(model, args.image), azimuths, math.radians(args.elevation))
    out = _out_dir(args.out)
    for i, img in enumerate(views):
        write_image(img, out / f"view_{i:02d}.png")
    return EXIT_OK


def cmd_interp(args) -> int:
    from .datasets import write_image
    from .evalkit import write_obj
    from .geom3d import Viewpoint

    model = _model(args)
    a, b = _image(model, args.a), _image(model, args.b)
    out = _out_dir(args.out)
    if args.kind == "shape":
        for i, mesh in enumerate(model.interpolate_shape(a, b, args.steps, args.resolution)):
            write_obj(mesh, out / f"step_{i:02d}.obj")
        return EXIT_OK
    code = model.encode(a)
    if args.shape:
        shape = _shape(args.shape)
    else:
        shape = model.decode_shape(code["zs"][:1])[1][0]
    view = code["views"][0]
    if args.azimuth is not None or args.elevation is not None:
        az = math.radians(args.azimuth) if args.azimuth is not None else view.azimuth
        el = math.radians(args.elevation) if args.elevation is not None else view.elevation
        view = Viewpoint(az, el)
    for i, img in enumerate(model.interpolate_appearance(a, b, args.steps, shape, view)):
        write_image(img, out / f"step_{i:02d}.png")
    return EXIT_OK


def cmd_modify(args) -> int:
    from .datasets import write_image

    model = _model(args)
    write_image(model.modify_shape(_image(model, args.image), _shape(args.shape)), args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sist", description="Self-supervised 2D image to 3D shape translation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (overrides 'out_dir' in the config)")
    s.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints in the output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="CD / IoU between predicted and ground-truth voxel files")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--metrics", default="cd,iou")
    s.add_argument("--out", default=".")
    s.add_argument("--points", type=int, default=1024)
    s.add_argument("--sampling", choices=("vertices", "surface"), default="vertices")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    def app(name, func, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--checkpoint", required=True)
        s.set_defaults(func=func)
        return s

    s = app("reconstruct", cmd_reconstruct, "image -> occupancy grid and OBJ mesh")
    s.add_argument("--image", required=True)
    s.add_argument("--decoder", choices=("voxel", "implicit"))
    s.add_argument("--resolution", type=int)
    s.add_argument("--out", default=".")

    s = app("generate", cmd_generate, "shape + viewpoint (+ appearance code) -> image")
    s.add_argument("--shape", required=True)
    s.add_argument("--azimuth", type=float, default=0.0)
    s.add_argument("--elevation", type=float, default=10.0)
    s.add_argument("--za", help="appearance code as a JSON list; sampled from N(0, I) when omitted")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = app("reconstruct-image", cmd_reconstruct_image, "encode an image and render it back")
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)

    s = app("nvs", cmd_nvs, "novel views of the object in an image")
    s.add_argument("--image", required=True)
    s.add_argument("--azimuths", required=True, help="comma-separated degrees")
    s.add_argument("--elevation", type=float, default=10.0)
    s.add_argument("--out", default=".")

    s = app("interp", cmd_interp, "appearance or shape interpolation between two images")
    s.add_argument("--kind", choices=("appearance", "shape"), required=True)
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--shape", help="fixed shape for appearance interpolation (default: reconstructed from --a)")
    s.add_argument("--azimuth", type=float)
    s.add_argument("--elevation", type=float)
    s.add_argument("--resolution", type=int)
    s.add_argument("--out", default=".")

    s = app("modify", cmd_modify, "re-render an image's appearance and viewpoint on another shape")
    s.add_argument("--image", required=True)
    s.add_argument("--shape", required=True)
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    from .losses import DivergenceError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"sist: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"sist: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
