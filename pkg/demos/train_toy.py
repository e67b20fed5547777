"""
Training on the toy dataset
===========================

Trains the full model on ten procedural shapes and their flat-coloured
renderings, which stand in for an unpaired photo collection. Checkpoints and
a JSONL loss log go to ``demo_out/toy_run``; rerunning resumes.

Pass a step count as the first argument (default 300).
"""
import json
import sys
from pathlib import Path

import numpy as np

from sist.apps import SISTModel
from sist.toy import make_toy_data, toy_azimuth_mae, toy_reconstruction_iou, toy_train_config
from sist.trainer import run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = Path("demo_out/toy_run")

shapes, images, gt, pairs = make_toy_data(32, 64, supervision_rate=0.25)
cfg = toy_train_config("implicit", 0.25, steps, checkpoint_every=100)


def report(trainer, rec):
    if rec["step"] % 50 == 0:
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))


trainer = run_training(cfg, shapes, images, pairs, out_dir=out, callback=report)

log = [json.loads(line) for line in (out / "losses.jsonl").read_text().splitlines()]
ls = np.array([r["L_S"] for r in log])
print(f"L_S: first 10 steps {ls[:10].mean():.3f}, last 50 steps {ls[-50:].mean():.3f}")

model = SISTModel(trainer.nets)
print(f"reconstruction IoU {toy_reconstruction_iou(model, shapes, images, gt, shapes.ids[:5]):.3f}")
print(f"azimuth error on generated images {toy_azimuth_mae(model, shapes):.1f} deg")
