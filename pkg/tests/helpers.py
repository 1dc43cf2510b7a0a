"""Shared test utilities: graph builders, numerical gradients, random nets."""
import numpy as np

from rfscope.graph import build_graph
from rfscope.netspec import parse_spec


def make_graph(text, seed=0):
    return build_graph(parse_spec(text), seed=seed)


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at ``x`` (mutates and restores ``x``)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


ZERO_FLOOR = 1e-8


def relative_error(a, b):
    """Norm-wise relative error.

    Tensors whose gradients are both below ``ZERO_FLOOR`` count as matching
    zeros: e.g. a bias feeding a train-mode batch norm has exactly zero
    gradient and the central difference only sees rounding noise.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < ZERO_FLOOR:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def randomize_parameters(graph, rng):
    """Give every parameter (including bn running stats) a non-trivial value."""
    for node in graph.nodes:
        p = node.params
        if "bias" in p:
            p["bias"][...] = rng.normal(0, 0.5, p["bias"].shape)
        if node.op == "bn":
            c = p["gamma"].shape
            p["gamma"][...] = rng.uniform(0.5, 1.5, c)
            p["beta"][...] = rng.normal(0, 0.5, c)
            p["running_mean"][...] = rng.normal(0, 0.5, c)
            p["running_var"][...] = rng.uniform(0.5, 2.0, c)
    return graph


def gradcheck(graph, x, mode="eval", h=1e-5, rng=None):
    """Max norm-wise relative error over the input and every trainable tensor."""
    rng = rng or np.random.default_rng(0)
    probe = rng.standard_normal(graph.forward(x, mode).output.shape)

    def f():
        return float((graph.forward(x, mode).output * probe).sum())

    tape = graph.forward(x, mode)
    grads = graph.backward(tape, {len(graph.nodes) - 1: probe})
    errors = {"input": relative_error(grads.input, central_difference(f, x, h))}
    for node, pname, param in graph.parameters():
        errors[f"{node.name}.{pname}"] = relative_error(grads.params[node.name][pname], central_difference(f, param, h))
    return errors


def random_spec_text(rng, max_layers=4):
    """A random net of at most ``max_layers`` body items drawn from every op type."""
    c = int(rng.integers(1, 4))
    size = int(rng.integers(7, 12))
    lines = ["name rand", f"input {c} {size} {size}"]
    ops = ["conv", "maxpool", "avgpool", "bn", "relu", "block"]
    for _ in range(int(rng.integers(1, max_layers + 1))):
        op = ops[int(rng.integers(len(ops)))]
        if op in ("bn", "relu"):
            lines.append(op)
            continue
        k = int(rng.integers(1, 5))
        s = int(rng.integers(1, 3))
        if op == "block":
            ch = int(rng.integers(1, 4))
            lines += ["resblock {", f"conv 3 {s} 1 {ch}", "bn", "relu", f"conv 3 1 1 {ch}"]
            if s != 1 or ch != c:
                lines += ["shortcut {", f"conv 1 {s} 0 {ch}", "}"]
            lines.append("}")
            c, size = ch, (size - 1) // s + 1
            continue
        k = min(k, size)
        pad = int(rng.integers(0, k)) if op != "conv" else int(rng.integers(0, k + 1))
        if op == "conv":
            ch = int(rng.integers(1, 4))
            lines.append(f"conv {k} {s} {pad} {ch}" + (" bias" if rng.random() < 0.5 else ""))
            c = ch
        else:
            lines.append(f"{op} {k} {s} {pad}")
        size = (size + 2 * pad - k) // s + 1
    if rng.random() < 0.5:
        lines += ["gap", f"fc {int(rng.integers(1, 4))} bias"]
    return "\n".join(lines) + "\n"


def random_strided_spec(rng):
    """A random single-channel topology of convs, pools and residual blocks."""
    size = int(rng.integers(24, 40))
    lines = ["name r", f"input 1 {size} {size}"]
    for _ in range(int(rng.integers(2, 5))):
        kind = rng.choice(["conv", "maxpool", "avgpool", "block"])
        k = int(rng.integers(1, 6))
        s = int(rng.integers(1, 3))
        if kind == "block":
            lines += ["resblock {", f"conv 3 {s} 1 1", "conv 3 1 1 1"]
            if s == 2:
                lines += ["shortcut {", "conv 1 2 0 1", "}"]
            lines.append("}")
            size = (size - 1) // s + 1
        else:
            pad = int(rng.integers(0, k))
            if size + 2 * pad < k:
                continue
            lines.append(f"{kind} {k} {s} {pad}" + (" 1" if kind == "conv" else ""))
            size = (size + 2 * pad - k) // s + 1
    return "\n".join(lines) + "\n"
