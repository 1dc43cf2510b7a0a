"""Quantitative summaries of ERF maps.

* ``fit_gaussian``: axis-aligned 2D Gaussian with offset, fitted by
  Levenberg-Marquardt with an analytic Jacobian.
* ``imbalance``: mean absolute first (L1) and second (L2) differences.
* ``build_linear_model`` / ``predict_tilde`` / ``perturbation_delta``: the
  frozen first-order model y ~ sum R * (channel sum of I) + E(C).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FitError
from .erf import ERFMap, Target, output_target, pairwise_sum
from .graph import input_gradient


def _values(erf):
    return np.asarray(erf.values if isinstance(erf, ERFMap) else erf, dtype=np.float64)


# --- Gaussian fit -------------------------------------------------------------

@dataclass
class Gauss2DFit:
    amplitude: float
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    offset: float
    r2: float
    iterations: int
    converged: bool

    def as_dict(self):
        return asdict(self)

    def evaluate(self, shape, origin=(0.0, 0.0)):
        y, x = _grid(shape, origin)
        return gaussian2d(np.array(self.params), x, y)

    @property
    def params(self):
        return (self.amplitude, self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.offset)


def _grid(shape, origin):
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return y + origin[1], x + origin[0]


def gaussian2d(p, x, y):
    a, mx, my, sx, sy, c = p
    return a * np.exp(-((x - mx) ** 2 / (2 * sx**2) + (y - my) ** 2 / (2 * sy**2))) + c


def _jacobian(p, x, y):
    a, mx, my, sx, sy, _ = p
    dx = x - mx
    dy = y - my
    e = np.exp(-(dx**2 / (2 * sx**2) + dy**2 / (2 * sy**2)))
    ae = a * e
    return np.stack(
        [e, ae * dx / sx**2, ae * dy / sy**2, ae * dx**2 / sx**3, ae * dy**2 / sy**3, np.ones_like(e)],
        axis=1,
    )


def moment_guess(z, x, y):
    """Initial (A, mu_x, mu_y, sigma_x, sigma_y, c) from image moments."""
    lo, hi = z.min(), z.max()
    w = z - lo
    total = w.sum()
    mx = (w * x).sum() / total
    my = (w * y).sum() / total
    sx = np.sqrt(max((w * (x - mx) ** 2).sum() / total, 0.25))
    sy = np.sqrt(max((w * (y - my) ** 2).sum() / total, 0.25))
    return np.array([hi - lo, mx, my, sx, sy, lo])


def fit_gaussian(erf, origin=(0.0, 0.0), max_iter=200, tol=1e-10):
    """Fit A*exp(-(dx^2/2sx^2 + dy^2/2sy^2)) + c to a field.

    ``origin`` is the (x, y) coordinate of pixel (0, 0); x runs along
    columns, y along rows.  The field is scaled to unit peak for the
    solve and the amplitude/offset are scaled back afterwards.
    """
    z = _values(erf)
    if z.ndim != 2:
        raise FitError(f"expected a 2D field, got shape {z.shape}")
    ss_tot = float(((z - z.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise FitError("zero variance, fit undefined")
    if np.unique(z).size < 6:
        raise FitError("fewer than 6 distinct values for 6 parameters")
    scale = float(np.abs(z).max())
    zs = (z / scale).ravel()
    y, x = _grid(z.shape, origin)
    x, y = x.ravel(), y.ravel()

    p = moment_guess(zs, x, y)
    r = gaussian2d(p, x, y) - zs
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        J = _jacobian(p, x, y)
        JtJ = J.T @ J
        g = J.T @ r
        improved = False
        while lam < 1e16:
            A = JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = p + step
            rc = gaussian2d(cand, x, y) - zs
            new_cost = float(rc @ rc)
            if np.isfinite(new_cost) and new_cost <= cost:
                improved = True
                break
            lam *= 10
        if not improved:
            converged = True  # no descent direction left at any damping
            break
        rel = (cost - new_cost) / max(cost, np.finfo(float).tiny)
        p, r, cost = cand, rc, new_cost
        lam = max(lam / 10, 1e-12)
        if rel < tol or cost == 0.0:
            converged = True
            break

    a, mx, my, sx, sy, c = p
    ss_res = float((r @ r) * scale**2)
    return Gauss2DFit(
        amplitude=float(a * scale),
        mu_x=float(mx),
        mu_y=float(my),
        sigma_x=float(abs(sx)),
        sigma_y=float(abs(sy)),
        offset=float(c * scale),
        r2=1.0 - ss_res / ss_tot,
        iterations=it,
        converged=converged,
    )


# --- imbalance indices ----------------------------------------------------------

@dataclass
class ImbalanceIndices:
    l1: float
    l2: float
    normalized: bool = False

    def as_dict(self):
        return asdict(self)


def imbalance(erf, normalize=False):
    """First/second-order imbalance of a field.

    L1 averages |forward difference| over both axes; L2 averages
    |centered second difference|.  The divisors are the number of
    difference terms, H(W-1) + W(H-1) and H(W-2) + W(H-2) (for 224x224:
    2*224*223 and 2*224*222).  With ``normalize`` the field is first
    divided by its sum.
    """
    r = _values(erf)
    if r.ndim != 2 or min(r.shape) < 3:
        raise ValueError(f"imbalance needs a field of at least 3x3, got {r.shape}")
    if normalize:
        total = r.sum()
        if total != 0:
            r = r / total
    h, w = r.shape
    d1 = np.abs(np.diff(r, axis=1)).sum() + np.abs(np.diff(r, axis=0)).sum()
    d2 = np.abs(np.diff(r, n=2, axis=1)).sum() + np.abs(np.diff(r, n=2, axis=0)).sum()
    l1 = d1 / (h * (w - 1) + w * (h - 1))
    l2 = d2 / (h * (w - 2) + w * (h - 2))
    return ImbalanceIndices(float(l1), float(l2), normalize)


# --- fixed linear model -----------------------------------------------------------

@dataclass
class FixedLinearModel:
    attribution: np.ndarray  # (H, W), the frozen ERF
    intercept: float  # E(C)
    intercepts: np.ndarray = field(default_factory=lambda: np.zeros(0))  # per-image C(n)
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PerturbationSpec:
    """Add ``epsilon`` to channel ``z`` of the pixel at column ``x``, row ``y``."""

    x: int
    y: int
    z: int
    epsilon: float


def linearization_offsets(graph, images, target, chunk=16):
    """Per-image C = y - sum(dy/dI * I) from one forward and one backward pass."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for s in range(0, len(images), chunk):
        batch = images[s : s + chunk]
        values, grad = input_gradient(graph, batch, target.node, target.reduction)
        dots = (grad * batch).reshape(len(batch), -1).sum(axis=1)
        out.append(values - dots)
    return np.concatenate(out)


def build_linear_model(graph, source, erf, class_mode=None):
    """Freeze an output ERF and the mean linearization offset into a linear model.

    ``class_mode`` ("mean" or an index) must match the ERF's target if given.
    """
    if len(source) == 0:
        raise ValueError("image source is empty")
    target = _target_from_erf(graph, erf)
    if class_mode is not None:
        wanted = output_target(class_mode).describe(graph)
        if wanted != erf.target:
            raise ValueError(f"ERF target {erf.target} does not match requested output {wanted}")
    offsets = linearization_offsets(graph, source.images, target)
    intercept = float(pairwise_sum(list(offsets)) / len(offsets))
    return FixedLinearModel(
        np.array(erf.values, dtype=np.float64),
        intercept,
        offsets,
        {"erf_target": erf.target, "n_images": len(offsets), "dataset": getattr(source, "ident", "")},
    )


def _target_from_erf(graph, erf):
    from .graph import Reduction

    desc = erf.target
    node = desc.get("node")
    if node is not None and graph.node_index(node) == len(graph.nodes) - 1:
        node = None
    red = Reduction.parse(desc.get("reduction", "logit_mean"))
    if red.kind == "center_channel_mean":
        raise ValueError("linear model needs an ERF of the network output, not of a feature map")
    return Target(node, red)


def predict_tilde(model, image):
    """Fixed-linear-model output: sum_xy R_xy * sum_z I_xyz + E(C)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[1:] != model.attribution.shape:
        raise ValueError(f"image shape {image.shape} does not match attribution {model.attribution.shape}")
    return float((model.attribution * image.sum(axis=0)).sum() + model.intercept)


def perturbation_delta(model, pert, channels=None):
    """Change of the fixed-model output for a single-pixel perturbation: epsilon * R[y, x]."""
    h, w = model.attribution.shape
    if not (0 <= pert.x < w and 0 <= pert.y < h):
        raise IndexError(f"perturbation at ({pert.x}, {pert.y}) outside {w}x{h} image")
    if pert.z < 0 or (channels is not None and pert.z >= channels):
        raise IndexError(f"channel {pert.z} out of range")
    return float(pert.epsilon * model.attribution[pert.y, pert.x])
