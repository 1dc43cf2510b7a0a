"""Effective receptive fields from per-image input gradients.

For each image the target scalar is differentiated with respect to the
input, the gradient is averaged over input channels, rectified, and only
then accumulated over the dataset.  Rectifying a batch-averaged gradient
instead would let opposite-signed images cancel, so batches are only used
in eval mode, where images do not interact and each row of the batch
gradient is exactly that image's own gradient.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .graph import Reduction, input_gradient
from .imageio import read_ppm, write_field_csv, write_pgm16

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DEFAULT_CHUNK = 16


@dataclass(frozen=True)
class Target:
    """Which node to probe and how to collapse it to a scalar (None = output)."""

    node: str | None = None
    reduction: Reduction = field(default_factory=Reduction)

    def describe(self, graph=None):
        node = self.node
        if node is None and graph is not None:
            node = graph.nodes[-1].name
        out = {"node": node, "reduction": self.reduction.describe()}
        if graph is not None and self.reduction.kind == "center_channel_mean":
            shape = graph.node(node).shape
            out["center"] = list(self.reduction.center(shape))
        return out


def output_target(class_mode="mean"):
    if class_mode in ("mean", None):
        return Target(None, Reduction("logit_mean"))
    return Target(None, Reduction("logit_index", int(class_mode)))


@dataclass
class ImageSource:
    """Normalized images as fed to the network, shape (N, C, H, W), float64."""

    images: np.ndarray
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    ident: str = ""
    names: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_pixels(cls, pixels, mean=IMAGENET_MEAN, std=IMAGENET_STD, ident="", names=None):
        """Build from (N, C, H, W) values in [0, 1]; channel normalization applied here."""
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) pixels, got {pixels.shape}")
        c = pixels.shape[1]
        m = np.resize(np.asarray(mean, dtype=np.float64), c)
        s = np.resize(np.asarray(std, dtype=np.float64), c)
        images = (pixels - m[None, :, None, None]) / s[None, :, None, None]
        return cls(images, tuple(m), tuple(s), ident, list(names or []))

    def subset(self, index):
        index = np.asarray(index)
        names = [self.names[i] for i in index] if self.names else []
        return ImageSource(self.images[index], self.mean, self.std, self.ident, names)


def synthetic_source(n, shape=(3, 64, 64), seed=0, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Seeded uniform-noise images; stands in for a dataset when none is given."""
    rng = np.random.default_rng(seed)
    pixels = rng.random((n,) + tuple(shape))
    return ImageSource.from_pixels(pixels, mean, std, ident=f"synthetic:n={n},shape={list(shape)},seed={seed}")


def load_images(path, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Load a directory of P6 images (lexicographic order) or an ``.npy`` tensor.

    A ``.npy`` file holds (N, C, H, W) pixel values in [0, 1].
    """
    if os.path.isfile(path) and path.endswith(".npy"):
        pixels = np.load(path)
        return ImageSource.from_pixels(pixels, mean, std, ident=f"npy:{_file_digest(path)}")
    if not os.path.isdir(path):
        raise FileNotFoundError(f"image source {path!r} does not exist")
    names = sorted(f for f in os.listdir(path) if f.lower().endswith((".ppm", ".pnm")))
    if not names:
        raise ValueError(f"image directory {path!r} is empty")
    imgs = []
    shape = None
    digest = hashlib.sha256()
    for fname in names:
        full = os.path.join(path, fname)
        try:
            img = read_ppm(full)
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot read image {fname!r}: {exc}") from None
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValueError(f"image {fname!r} has shape {img.shape}, expected {shape}")
        maxval = 65535.0 if img.dtype == np.uint16 else 255.0
        imgs.append(img.transpose(2, 0, 1) / maxval)
        digest.update(fname.encode())
        digest.update(img.tobytes())
    return ImageSource.from_pixels(np.stack(imgs), mean, std, ident=f"ppmdir:{digest.hexdigest()[:16]}", names=names)


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


# --- gradients ------------------------------------------------------------------

def image_gradient(graph, image, target=Target()):
    """G: (H, W) channel-averaged input gradient of the target scalar for one image."""
    image = np.asarray(image, dtype=np.float64)
    _, grad = input_gradient(graph, image[None], target.node, target.reduction)
    return grad[0].mean(axis=0)


def image_gradients(graph, images, target=Target(), chunk=DEFAULT_CHUNK, workers=None):
    """Per-image G maps, shape (N, H, W).

    Images go through the graph in fixed chunks (eval mode); ``workers``
    threads process chunks concurrently.  Chunk boundaries do not depend on
    the worker count, so results are identical for any number of workers.
    """
    images = np.asarray(images, dtype=np.float64)
    starts = list(range(0, len(images), chunk))

    def run(s):
        _, grad = input_gradient(graph, images[s : s + chunk], target.node, target.reduction)
        return grad.mean(axis=1)

    workers = workers or default_workers()
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0)


def default_workers():
    try:
        return max(1, int(os.environ.get("RFSCOPE_THREADS", "1")))
    except ValueError:
        return 1


def pairwise_sum(maps):
    """Sum a sequence of equal-shape arrays with a fixed balanced tree."""
    maps = list(maps)
    if not maps:
        raise ValueError("nothing to sum")
    while len(maps) > 1:
        nxt = [maps[i] + maps[i + 1] for i in range(0, len(maps) - 1, 2)]
        if len(maps) % 2:
            nxt.append(maps[-1])
        maps = nxt
    return maps[0]


# --- accumulation ---------------------------------------------------------------

@dataclass
class ERFMap:
    values: np.ndarray
    n_images: int
    target: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape

    def merge(self, other):
        """Size-weighted average with an ERF over a disjoint image set."""
        if self.target != other.target:
            raise ValueError("cannot merge ERF maps with different targets")
        n = self.n_images + other.n_images
        values = (self.values * self.n_images + other.values * other.n_images) / n
        return ERFMap(values, n, dict(self.target), {"merged": [self.provenance, other.provenance]})

    def sidecar(self):
        return {
            "shape": list(self.values.shape),
            "n_images": self.n_images,
            "target": self.target,
            "provenance": self.provenance,
        }

    def save(self, prefix):
        """Write ``<prefix>.csv``, ``<prefix>.pgm`` and ``<prefix>.json``."""
        write_field_csv(prefix + ".csv", self.values)
        write_pgm16(prefix + ".pgm", self.values)
        with open(prefix + ".json", "w", encoding="utf-8") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return [prefix + ".csv", prefix + ".pgm", prefix + ".json"]


def accumulate_erf(graph, source, target=Target(), chunk=DEFAULT_CHUNK, workers=None, provenance=None):
    """R = (1/N) * sum_n relu(G_n), rectified per image before accumulation."""
    images = source.images if isinstance(source, ImageSource) else np.asarray(source)
    if len(images) == 0:
        raise ValueError("image source is empty")
    if graph.nodes[0].shape != images.shape[1:]:
        from .errors import ShapeError

        raise ShapeError(f"images have shape {images.shape[1:]}, graph expects {graph.input_shape}", "input")
    grads = image_gradients(graph, images, target, chunk, workers)
    rectified = np.maximum(grads, 0.0)
    values = pairwise_sum(rectified) / len(images)
    prov = {"dataset": getattr(source, "ident", "")}
    prov.update(provenance or {})
    return ERFMap(values, len(images), target.describe(graph), prov)


def erf_of_output(graph, source, class_mode="mean", **kwargs):
    """ERF of the network output (the dead-pixel test); ``class_mode`` is "mean" or a logit index."""
    return accumulate_erf(graph, source, output_target(class_mode), **kwargs)
