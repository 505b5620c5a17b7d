"""Subcommand bodies: each takes a RunConfig and returns a report dict.

Reports are written by :func:`emit` as ``<name>.json`` plus ``<name>.txt``
in the run's output directory. A report's ``passed`` key, when present,
decides the exit status of the command.
"""
from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from . import checkpoint, cost, imageio
from .config import RunConfig
from .gradcheck import grad_check
from .metrics import ConfusionMatrix, metrics
from .model import SGD, build, predict, recalibrate_bn, train_step
from .scenes import generate_scenes, load_dataset
from .tensor import no_grad


def emit(cfg: RunConfig, name: str, report: dict) -> Path:
    lines = [f"{k}: {v}" for k, v in report.items() if not isinstance(v, (dict, list))]
    return cost.write_report(cfg.out_dir, name, report, lines)


def gradcheck(cfg: RunConfig) -> dict:
    """Full-model gradient check in double precision on ``grad_seeds`` seeds."""
    h, w = cfg.model.input_size
    c_d = cfg.model.depth_input_channels
    runs, t0 = [], time.perf_counter()
    for k in range(cfg.grad_seeds):
        seed = cfg.seed + k
        model, store = build(cfg.model.with_(seed=seed), dtype=np.float64)
        model.eval()
        rep = grad_check(lambda r, d: model(r, d).logits, [(1, 3, h, w), (1, c_d, h, w)],
                         dict(store.items()), threshold=cfg.grad_threshold, seed=seed,
                         max_coords=cfg.grad_coords, skip_kinks=True)
        worst = max(rep.max_rel, key=rep.max_rel.get)
        runs.append({"seed": seed, "max_rel": rep.worst, "worst_tensor": worst,
                     "kinks_skipped": sum(rep.kinks.values()), "passed": rep.passed})
    worst = max(r["max_rel"] for r in runs)
    return {"max_rel": worst, "threshold": cfg.grad_threshold, "seeds": len(runs),
            "passed": all(r["passed"] for r in runs), "seconds": time.perf_counter() - t0, "runs": runs}


def params(cfg: RunConfig) -> dict:
    model, store = build(cfg.model)
    rep = cost.count_params(store)
    return {"params_total": rep.params_total, "params_millions": rep.params_total / 1e6,
            "params": rep.params, "config": cfg.model.to_dict()}


def flops(cfg: RunConfig) -> dict:
    model, _ = build(cfg.model)
    h, w = cfg.model.input_size
    rep = cost.count_flops(model, (1, h, w))
    return {"macs_total": rep.macs_total, "gmacs": rep.macs_total / 1e9, "unit": "multiply-accumulates",
            "input_shape": [1, h, w], "macs": rep.macs}


def bench(cfg: RunConfig) -> dict:
    model, _ = build(cfg.model)
    rep = cost.benchmark(model, (1, *cfg.bench_size), cfg.bench_warmup, cfg.bench_iters, cfg.seed)
    return {**rep.timing, "iters": cfg.bench_iters, "input_shape": [1, *cfg.bench_size],
            "samples_s": rep.samples}


def dataset(cfg: RunConfig, path: str | None = None):
    """Load ``path``/``cfg.data_path``, or generate synthetic scenes under the output dir."""
    root = path or cfg.data_path
    if not root:
        root = Path(cfg.out_dir) / "scenes"
        generate_scenes(cfg.scene_spec(), cfg.scenes, cfg.seed, root)
    return load_dataset(root)


def evaluate(model, rgb, depth, labels, batch_size: int = 16) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.cfg.n_classes)
    with no_grad():
        for i in range(0, len(rgb), batch_size):
            cm.accumulate(predict(model, rgb[i:i + batch_size], depth[i:i + batch_size]),
                          labels[i:i + batch_size])
    return cm


def fit(cfg: RunConfig, rgb, depth, labels, log=None):
    """SGD with momentum over mini-batches; stops early once train mIoU reaches the target."""
    model, store = build(cfg.model)
    opt = SGD([p for _, p in store.items()], lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(rgb)
    history = []
    miou = float("nan")
    step = 0
    for step in range(1, cfg.steps + 1):
        idx = np.sort(rng.permutation(n)[:cfg.batch_size]) if cfg.batch_size < n else np.arange(n)
        loss = train_step(model, (rgb[idx], depth[idx], labels[idx]), opt)
        if step % 25 == 0 or step == cfg.steps:
            recalibrate_bn(model, rgb, depth, cfg.batch_size)
            miou = metrics(evaluate(model, rgb, depth, labels, cfg.batch_size)).miou
            history.append({"step": step, "loss": loss.total, "miou": miou})
            if log:
                log(f"step {step:4d} loss {loss.total:.4f} train mIoU {miou:.4f}")
            if miou >= cfg.target_miou:
                break
    return model, step, history


def train_toy(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    rgb, depth, labels, _ = dataset(cfg)
    model, steps, history = fit(cfg, rgb, depth, labels, log=print)
    m = metrics(evaluate(model, rgb, depth, labels, cfg.batch_size))
    ckpt = checkpoint.save(model, Path(cfg.out_dir) / "model.ckpt")
    return {"miou": m.miou, "pixacc": m.pixacc, "macc": m.macc, "steps": steps,
            "target_miou": cfg.target_miou, "passed": bool(m.miou >= cfg.target_miou),
            "seconds": time.perf_counter() - t0, "checkpoint": str(ckpt), "history": history}


def eval_(cfg: RunConfig, ckpt: str, data: str | None) -> dict:
    model = checkpoint.load(ckpt)
    rgb, depth, labels, ids = dataset(cfg, data)
    labels = np.where(labels >= model.cfg.n_classes, 255, labels)
    cm = evaluate(model, rgb, depth, labels, cfg.batch_size)
    m = metrics(cm)
    return {"miou": m.miou, "pixacc": m.pixacc, "macc": m.macc, "undefined": m.undefined,
            "samples": len(ids), "ignored_pixels": cm.ignored,
            "iou": [None if np.isnan(v) else float(v) for v in m.iou]}


def infer(cfg: RunConfig, ckpt: str, data: str | None, export_gates: bool = False) -> dict:
    """Write predicted label maps and P6 overlays, optionally gate maps as P5."""
    model = checkpoint.load(ckpt)
    rgb, depth, _, ids = dataset(cfg, data)
    out = Path(cfg.out_dir) / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    written = []
    with no_grad():
        for i, sid in enumerate(ids):
            res = model(rgb[i:i + 1], depth[i:i + 1], diagnostics=export_gates)
            pred = res.logits.data.argmax(axis=1)[0]
            image = np.clip(np.rint((rgb[i].transpose(1, 2, 0) + 1) * 127.5), 0, 255).astype(np.uint8)
            imageio.write_labels(out / f"{sid}_pred.pgm", pred.astype(np.uint8))
            imageio.write_rgb(out / f"{sid}_overlay.ppm", imageio.overlay(image, pred))
            written.append(sid)
            if export_gates:
                for k, g in enumerate(res.diagnostics["gates"]):
                    for branch, gates in g.items():
                        a = np.asarray(gates.data)[0]
                        img = a.mean(axis=0) if a.shape[1] * a.shape[2] > 1 else a.reshape(1, -1)
                        imageio.write(out / f"{sid}_afm{k}_{branch}.pgm", imageio.to_grey(img))
    return {"samples": len(written), "out": str(out)}
