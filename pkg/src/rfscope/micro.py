"""Micro-object benchmark: find a tiny black vs. red patch on a busy background.

Images are templates with one 8x8 block overwritten by RGB (0, 0, 0)
(class 0, "A") or RGB (255, 0, 0) (class 1, "B") at a uniformly random
position.  Networks train from scratch with SGD + momentum, weight decay and
a cosine learning-rate schedule; the figure of merit is the first epoch
whose test accuracy exceeds a threshold.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import TrainingDivergedError

logger = logging.getLogger(__name__)

CLASS_COLORS = {0: (0, 0, 0), 1: (255, 0, 0)}
TEMPLATE_RANGE = (16, 239)


@dataclass
class MicroDatasetConfig:
    image_size: tuple = (64, 64)
    patch_size: int = 8
    train_per_class: int = 1000
    test_per_class: int = 250
    templates_per_split: int = 200
    template_dir: str | None = None
    seed: int = 0


@dataclass
class MicroSplit:
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64
    positions: np.ndarray  # (N, 2) top-left (row, col) of the patch
    templates: np.ndarray  # (N,) template index

    def __len__(self):
        return len(self.labels)


@dataclass
class MicroDataset:
    train: MicroSplit
    test: MicroSplit
    config: MicroDatasetConfig


# --- templates -----------------------------------------------------------------

def procedural_template(rng, size):
    """Smooth colored noise plus a few soft blobs, clipped away from pure colors."""
    h, w = size
    coarse = rng.uniform(0, 1, size=(max(h // 8, 2), max(w // 8, 2), 3))
    rows = np.minimum((np.arange(h) * coarse.shape[0]) // h, coarse.shape[0] - 1)
    cols = np.minimum((np.arange(w) * coarse.shape[1]) // w, coarse.shape[1] - 1)
    img = coarse[rows][:, cols]
    # separable box blur to soften the upsampling blocks
    k = np.ones(5) / 5
    for axis in (0, 1):
        img = np.apply_along_axis(lambda v: np.convolve(np.pad(v, 2, mode="edge"), k, "valid"), axis, img)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(0.08, 0.3) * min(h, w)
        color = rng.uniform(0, 1, size=3)
        alpha = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))[..., None]
        img = img * (1 - alpha) + color * alpha
    img = img + rng.normal(0, 0.04, size=img.shape)
    lo, hi = TEMPLATE_RANGE
    return np.clip(np.rint(lo + img * (hi - lo)), lo, hi).astype(np.uint8)


def _load_template_dir(path, size):
    from .imageio import read_ppm, resize_nearest

    names = sorted(f for f in os.listdir(path) if f.lower().endswith((".ppm", ".pnm")))
    if not names:
        raise ValueError(f"template directory {path!r} contains no PPM images")
    return [resize_nearest(read_ppm(os.path.join(path, f)), size) for f in names]


def _make_split(rng, templates, n_per_class, size, patch):
    h, w = size
    n = 2 * n_per_class
    labels = np.repeat(np.arange(2), n_per_class)
    rng.shuffle(labels)
    images = np.empty((n, h, w, 3), dtype=np.uint8)
    positions = np.empty((n, 2), dtype=np.int64)
    tids = rng.integers(0, len(templates), size=n)
    for i in range(n):
        r = rng.integers(0, h - patch + 1)
        c = rng.integers(0, w - patch + 1)
        img = templates[tids[i]].copy()
        img[r : r + patch, c : c + patch] = CLASS_COLORS[int(labels[i])]
        images[i] = img
        positions[i] = (r, c)
    return MicroSplit(images, labels, positions, tids)


def generate_micro_dataset(cfg):
    """Build balanced train/test splits; bit-identical for a given config."""
    h, w = cfg.image_size
    if cfg.patch_size > min(h, w):
        raise ValueError(f"patch {cfg.patch_size} larger than image {h}x{w}")
    root = np.random.SeedSequence(cfg.seed)
    tmpl_train, tmpl_test, draw_train, draw_test = (np.random.default_rng(s) for s in root.spawn(4))
    if cfg.template_dir:
        pool = _load_template_dir(cfg.template_dir, (h, w))
        train_t = test_t = pool
    else:
        # disjoint template streams per split
        train_t = [procedural_template(tmpl_train, (h, w)) for _ in range(cfg.templates_per_split)]
        test_t = [procedural_template(tmpl_test, (h, w)) for _ in range(cfg.templates_per_split)]
    train = _make_split(draw_train, train_t, cfg.train_per_class, (h, w), cfg.patch_size)
    test = _make_split(draw_test, test_t, cfg.test_per_class, (h, w), cfg.patch_size)
    return MicroDataset(train, test, cfg)


def export_split(split, directory):
    """Write a split as ``NNNNN.ppm`` files plus ``labels.csv``."""
    from .imageio import write_ppm

    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "label", "row", "col", "template"])
        for i in range(len(split)):
            fname = f"{i:05d}.ppm"
            write_ppm(os.path.join(directory, fname), split.images[i])
            r, c = split.positions[i]
            writer.writerow([fname, int(split.labels[i]), int(r), int(c), int(split.templates[i])])


# --- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    flip: bool = True
    dtype: str = "float32"
    stop_threshold: float | None = None  # stop once test accuracy exceeds this

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0
    stopped_early: bool = False

    @property
    def test_accuracy(self):
        return [r.test_acc for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "train_acc", "test_acc", "lr"])
            for r in self.records:
                writer.writerow([r.epoch] + [repr(float(v)) for v in (r.train_loss, r.train_acc, r.test_acc, r.lr)])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [
                EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]), float(r["test_acc"]), float(r["lr"]))
                for r in rows
            ]
        )


def cosine_lr(base_lr, epoch, epochs):
    """Learning rate for 0-indexed ``epoch``; reaches 0 at ``epoch == epochs``."""
    return 0.5 * base_lr * (1 + math.cos(math.pi * epoch / epochs))


def softmax_cross_entropy(logits):
    """Return (per-sample log-softmax, softmax) for (N, K) logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return logp, np.exp(logp)


def channel_stats(images):
    x = images.reshape(-1, 3).astype(np.float64) / 255.0
    return x.mean(axis=0), x.std(axis=0)


def to_tensor(images, mean, std, dtype=np.float32):
    x = (images.astype(np.float64) / 255.0 - mean) / std
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=dtype)


class SGD:
    """SGD with momentum (PyTorch convention) and decoupled parameter groups.

    Weight decay applies to conv and fc weights only; biases and batch-norm
    scale/shift are excluded.
    """

    def __init__(self, graph, lr, momentum, weight_decay):
        self.graph = graph
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}
        self.decay = {}
        for node, pname, _ in graph.parameters():
            self.decay[(node.name, pname)] = weight_decay if pname == "weight" else 0.0

    def step(self, grads):
        for node, pname, param in self.graph.parameters():
            g = grads.get(node.name, {}).get(pname)
            if g is None:
                continue
            key = (node.name, pname)
            wd = self.decay[key]
            if wd:
                g = g + wd * param
            v = self.velocity.get(key)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[key] = v
            param -= self.lr * v


def evaluate(graph, x, y, batch_size=256):
    correct = 0
    for s in range(0, len(y), batch_size):
        out = graph.forward(x[s : s + batch_size], mode="eval").output
        correct += int((out.reshape(out.shape[0], -1).argmax(axis=1) == y[s : s + batch_size]).sum())
    return correct / len(y)


def train(graph, dataset, cfg):
    """Train ``graph`` in place on a MicroDataset; returns the TrainLog."""
    if graph.output_shape[0] != 2:
        raise ValueError(f"micro task needs a 2-logit head, graph outputs {graph.output_shape}")
    dtype = np.dtype(cfg.dtype)
    if graph.dtype != dtype:
        trained = graph.astype(dtype)
        graph.nodes, graph.dtype = trained.nodes, trained.dtype
    mean, std = channel_stats(dataset.train.images)
    x_train = to_tensor(dataset.train.images, mean, std, dtype)
    y_train = dataset.train.labels
    x_test = to_tensor(dataset.test.images, mean, std, dtype)
    y_test = dataset.test.labels
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(graph, cfg.lr, cfg.momentum, cfg.weight_decay)
    log = TrainLog(config={**asdict(cfg), "normalization": {"mean": mean.tolist(), "std": std.tolist()}})
    start = time.perf_counter()
    n = len(y_train)
    out_idx = len(graph.nodes) - 1
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if cfg.flip else np.zeros(n, dtype=bool)
        loss_sum = 0.0
        correct = 0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            xb = x_train[idx]
            fb = flips[idx]
            if fb.any():
                xb[fb] = xb[fb][..., ::-1]
            yb = y_train[idx]
            tape = graph.forward(xb, mode="train")
            logits = tape.output.reshape(len(idx), -1).astype(np.float64)
            logp, prob = softmax_cross_entropy(logits)
            loss = -logp[np.arange(len(idx)), yb].mean()
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}, batch {b}, lr {opt.lr:.3g}")
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
            dlogits = prob
            dlogits[np.arange(len(idx)), yb] -= 1.0
            dlogits /= len(idx)
            grads = graph.backward(tape, {out_idx: dlogits.reshape(tape.output.shape)}, need_input=False)
            opt.step(grads.params)
        test_acc = evaluate(graph, x_test, y_test)
        rec = EpochRecord(epoch + 1, loss_sum / n, correct / n, test_acc, opt.lr)
        log.records.append(rec)
        logger.info("epoch %d loss %.4f train %.3f test %.3f lr %.5f", rec.epoch, rec.train_loss, rec.train_acc, rec.test_acc, rec.lr)
        if cfg.stop_threshold is not None and test_acc > cfg.stop_threshold:
            log.stopped_early = epoch + 1 < cfg.epochs
            break
    log.wall_time = time.perf_counter() - start
    return log


def epochs_to_threshold(log, threshold=0.9, max_epochs=None):
    """1-indexed first epoch with test accuracy strictly above ``threshold``.

    Runs that never exceed it count as ``max_epochs`` (default: the
    configured epoch budget, else the number of logged epochs).
    """
    for rec in log.records:
        if rec.test_acc > threshold:
            return rec.epoch
    if max_epochs is None:
        max_epochs = log.config.get("epochs", len(log.records))
    return max_epochs

