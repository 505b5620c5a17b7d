"""Overfit a handful of synthetic RGB-D scenes and save coloured predictions.

Run: python demos/overfit_toy.py [out_dir]
"""
import sys
from pathlib import Path

from sgacnet import TOY_TRAIN_RUN, metrics
from sgacnet import harness, imageio
from sgacnet.model import predict


def main(out="demo_out"):
    cfg = TOY_TRAIN_RUN.with_(out_dir=out, scenes=8)
    rgb, depth, labels, ids = harness.dataset(cfg)
    model, steps, _ = harness.fit(cfg, rgb, depth, labels, log=print)
    m = metrics(harness.evaluate(model, rgb, depth, labels))
    print(f"stopped after {steps} steps: mIoU {m.miou:.3f}, pixel acc {m.pixacc:.3f}")
    pred = predict(model, rgb, depth)
    for i, sid in enumerate(ids[:4]):
        imageio.write_rgb(Path(out) / f"{sid}_truth.ppm", imageio.colourize(labels[i]))
        imageio.write_rgb(Path(out) / f"{sid}_pred.ppm", imageio.colourize(pred[i]))
    print(f"wrote colour maps to {out}/")


if __name__ == "__main__":
    main(*sys.argv[1:2])
