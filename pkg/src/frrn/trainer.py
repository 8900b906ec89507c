"""Training loop binding networks, bootstrapped loss, augmentation,
checkpointed backprop and IoU evaluation.

Randomness is derived statelessly: parameter init uses default_rng((seed, 0)),
training step t uses default_rng((seed, 1, t)) for batch sampling and
augmentation draws. Resuming from a checkpoint at iteration t therefore
continues the exact trace of an uninterrupted run.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import augmentation, data, evaluation, network
from .autodiff import adam_step, backward_checkpointed, backward_full, zero_grads
from .checkpoint import load_checkpoint, save_checkpoint
from .loss import bootstrapped_ce, k_schedule


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    arch: str = "frrn-a-mini"
    iterations: int = 400
    batch_size: int = 3
    lr_schedule: tuple = ((300, 1e-3), (400, 1e-4))
    k_fraction: float = 0.125
    translate: bool = True
    max_shift: int = 0          # 0 -> width // 8
    gamma_a: float = 0.35
    cut_points: str = "none"    # "none" | "stages"
    seed: int = 7
    eval_every: int = 50
    precision: str = "f32"      # "f32" | "f64"
    out_dir: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision '{self.precision}'")
        sched = tuple(tuple(x) for x in self.lr_schedule)
        if not sched or sched[-1][0] < self.iterations:
            raise ValueError("lr_schedule must cover all iterations")
        self.lr_schedule = sched

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            cfg = json.load(f)
        cfg.pop("data", None)
        cfg.pop("seeds", None)
        return cls(**cfg)


def lr_at(schedule, iteration):
    """Learning rate for 0-based iteration; schedule entries are
    (first_iteration_after, lr)."""
    for until, lr in schedule:
        if iteration < until:
            return lr
    return schedule[-1][1]


@dataclass
class TrainResult:
    log_rows: list                # (iteration, lr, loss, k_used)
    eval_rows: list               # (iteration, mean_iou)
    best_iou: float
    best_iteration: int
    store: object
    spec: object
    log_csv: str = ""


def _augment(sample, rng, cfg):
    img, lbl = sample.image, sample.labels
    if cfg.translate:
        h, w = lbl.shape
        max_dx = cfg.max_shift or w // 8
        max_dy = cfg.max_shift or h // 8
        dx, dy = augmentation.random_translation(rng, max_dx, max_dy)
        img, lbl = augmentation.translate(img, lbl, dx, dy)
    if cfg.gamma_a > 0:
        z = rng.uniform(-cfg.gamma_a, cfg.gamma_a)
        img = augmentation.apply_gamma(img, augmentation.gamma_for_z(z))
    return img, lbl


def train_step(spec, store, batch_images, batch_labels, cfg, iteration):
    """One forward/backward/ADAM update; returns the loss report."""
    tape, info = network.forward(spec, store, batch_images, training=True,
                                 cut_policy=cfg.cut_points)
    h, w = batch_labels.shape[1:]
    k = k_schedule(h, w, cfg.k_fraction) * batch_labels.shape[0]
    loss_node, report = bootstrapped_ce(tape, info.probs, batch_labels, k)
    if not np.isfinite(report.loss):
        raise TrainingDiverged(
            f"non-finite loss {report.loss} at iteration {iteration}")
    zero_grads(store.parameters())
    if cfg.cut_points == "stages":
        backward_checkpointed(tape, loss_node)
    else:
        backward_full(tape, loss_node)
    adam_step(store.parameters(), lr_at(cfg.lr_schedule, iteration))
    return report


def _make_batch(samples, idx, dtype, cfg, rng):
    imgs, lbls = [], []
    for i in idx:
        img, lbl = _augment(samples[i], rng, cfg)
        imgs.append(img.astype(dtype, copy=False))
        lbls.append(lbl)
    return np.concatenate(imgs, axis=0), np.stack(lbls)


def train(cfg, dataset, store=None, start_iteration=0, log_path=None):
    """Train cfg.arch on a dataset (manifest dict or path); returns
    TrainResult. The best-IoU checkpoint is written to cfg.out_dir if set."""
    manifest = dataset if isinstance(dataset, dict) else data.load_manifest(dataset)
    train_samples = data.load_split(manifest, "train")
    val_samples = data.load_split(manifest, "val")
    if not train_samples:
        raise ValueError("dataset has no training samples")
    spec = network.ARCHS[cfg.arch](manifest["num_classes"])
    if store is None:
        store = network.init_params(spec, seed=cfg.seed, dtype=cfg.dtype)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_rows, eval_rows = [], []
    best_iou, best_iter = -1.0, -1

    def maybe_eval(it):
        nonlocal best_iou, best_iter
        miou = evaluate_samples(spec, store, val_samples)[1]
        eval_rows.append((it, miou))
        if miou > best_iou:
            best_iou, best_iter = miou, it
            if out_dir:
                save_checkpoint(out_dir / "best.ckpt", store, _meta(cfg, spec, it, miou))

    for t in range(start_iteration, cfg.iterations):
        rng = np.random.default_rng((int(cfg.seed), 1, t))
        idx = rng.integers(0, len(train_samples), size=cfg.batch_size)
        images, labels = _make_batch(train_samples, idx, cfg.dtype, cfg, rng)
        report = train_step(spec, store, images, labels, cfg, t)
        log_rows.append((t, lr_at(cfg.lr_schedule, t), report.loss, report.k_used))
        if cfg.eval_every and (t + 1) % cfg.eval_every == 0:
            maybe_eval(t + 1)
    if not eval_rows or eval_rows[-1][0] != cfg.iterations:
        maybe_eval(cfg.iterations)

    log_csv = _log_to_csv(log_rows, eval_rows)
    if out_dir:
        (out_dir / "train_log.csv").write_text(log_csv)
        save_checkpoint(out_dir / "last.ckpt", store,
                        _meta(cfg, spec, cfg.iterations, best_iou))
    return TrainResult(log_rows, eval_rows, best_iou, best_iter, store, spec,
                       log_csv)


def _meta(cfg, spec, iteration, best_iou):
    return {"arch": cfg.arch, "num_classes": spec.num_classes,
            "iteration": iteration, "precision": cfg.precision,
            "seed": cfg.seed, "best_iou": best_iou}


def _log_to_csv(log_rows, eval_rows):
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(["iteration", "lr", "loss", "k_used"])
    wr.writerows(log_rows)
    wr.writerow([])
    wr.writerow(["iteration", "val_mean_iou"])
    wr.writerows(eval_rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_samples(spec, store, samples, dump_dir=None):
    """Mean IoU of argmax predictions over samples (BN in inference mode).
    Returns (per_class, mean_iou, confusion)."""
    cm = evaluation.ConfusionMatrix.zeros(spec.num_classes)
    for i, s in enumerate(samples):
        probs = network.predict(spec, store, s.image.astype(store.dtype))
        pred = probs[0].argmax(axis=0).astype(np.uint8)
        evaluation.accumulate(cm, s.labels, pred)
        if dump_dir:
            data.save_label(pred, Path(dump_dir) / f"pred_{i:05d}.pgm")
    per_class, miou = evaluation.mean_iou(cm)
    return per_class, miou, cm


def evaluate_checkpoint(ckpt_path, dataset, split="val", dump_dir=None):
    """Evaluate a stored checkpoint; returns (per_class, mean_iou, meta)."""
    manifest = dataset if isinstance(dataset, dict) else data.load_manifest(dataset)
    store, meta = load_checkpoint(ckpt_path)
    if meta.get("num_classes") != manifest["num_classes"]:
        raise ValueError(
            f"checkpoint has {meta.get('num_classes')} classes, dataset has "
            f"{manifest['num_classes']}")
    spec = network.ARCHS[meta["arch"]](manifest["num_classes"])
    samples = data.load_split(manifest, split)
    per_class, miou, _ = evaluate_samples(spec, store, samples, dump_dir)
    return per_class, miou, meta


# ---------------------------------------------------------------------------
# two-architecture comparison
# ---------------------------------------------------------------------------


@dataclass
class CompareReport:
    arch_a: str
    arch_b: str
    params_a: int
    params_b: int
    per_seed: dict = field(default_factory=dict)  # arch -> [(seed, best_iou)]
    curves_csv: str = ""

    def mean_iou(self, arch):
        vals = [v for _, v in self.per_seed[arch]]
        return float(np.mean(vals))


def compare_architectures(cfg, dataset, seeds=(1, 2, 3),
                          arch_a="frrn-a-mini", arch_b="resnet-baseline-mini"):
    """Train both architectures on the same seeds and budget; returns a
    CompareReport with per-seed best IoU and best-so-far curves as CSV."""
    manifest = dataset if isinstance(dataset, dict) else data.load_manifest(dataset)
    report = CompareReport(
        arch_a, arch_b,
        network.count_parameters(network.ARCHS[arch_a](manifest["num_classes"])),
        network.count_parameters(network.ARCHS[arch_b](manifest["num_classes"])),
        {arch_a: [], arch_b: []})
    buf = io.StringIO()
    wr = csv.writer(buf)
    wr.writerow(["arch", "seed", "iteration", "val_mean_iou", "best_so_far"])
    for arch in (arch_a, arch_b):
        for seed in seeds:
            run_cfg = replace(cfg, arch=arch, seed=int(seed), out_dir="")
            result = train(run_cfg, manifest)
            best = -1.0
            for it, miou in result.eval_rows:
                best = max(best, miou)
                wr.writerow([arch, seed, it, f"{miou:.6f}", f"{best:.6f}"])
            report.per_seed[arch].append((int(seed), result.best_iou))
    report.curves_csv = buf.getvalue()
    return report
