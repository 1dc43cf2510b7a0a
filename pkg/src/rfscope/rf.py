"""Theoretical receptive fields and window-coverage counts.

The TRF recurrence walks the graph once: a window op with kernel ``k`` and
stride ``s`` maps ``(r, j, o)`` to ``(r + (k-1) j, j s, o + ((k-1)/2 - pad_lo) j)``.
Residual joins take the per-axis maximum size and require equal jumps.

Coverage counts say how many sliding-window reference paths connect each
input pixel to the output grid.  They are computed twice, independently:
by explicit enumeration of window placements, and by running the input
gradient of a linearized copy of the graph (single channel, all-ones
kernels, no nonlinearities).  The two must agree exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RFScopeError
from .graph import NetGraph, Node
from .netspec import Layer

WINDOW_OPS = ("conv", "maxpool", "avgpool")


@dataclass(frozen=True)
class RFInfo:
    rf_size: tuple
    jump: tuple
    start_offset: tuple
    global_head: bool = False

    def as_dict(self):
        return {
            "rf_size": list(self.rf_size),
            "jump": list(self.jump),
            "start_offset": list(self.start_offset),
            "global_head": self.global_head,
        }


def _step(info, node):
    if node.op not in WINDOW_OPS:
        if node.op in ("gap", "fc"):
            return RFInfo(info.rf_size, info.jump, info.start_offset, True)
        return info
    k = node.layer.kernel
    s = node.layer.stride
    pt, _, pl, _ = node.layer.padding
    r = tuple(r + (k - 1) * j for r, j in zip(info.rf_size, info.jump))
    o = tuple(o + ((k - 1) / 2 - p) * j for o, p, j in zip(info.start_offset, (pt, pl), info.jump))
    return RFInfo(r, tuple(j * s for j in info.jump), o, info.global_head)


def compute_all_trf(graph):
    infos = [RFInfo((1, 1), (1, 1), (0.0, 0.0))]
    for node in graph.nodes[1:]:
        if node.op == "add":
            a, b = (infos[p] for p in node.parents)
            if a.jump != b.jump:
                raise RFScopeError(
                    f"residual join {node.name!r}: branch jumps differ ({a.jump} vs {b.jump})"
                )
            size = tuple(max(x, y) for x, y in zip(a.rf_size, b.rf_size))
            infos.append(RFInfo(size, a.jump, a.start_offset, a.global_head or b.global_head))
        else:
            infos.append(_step(infos[node.parents[0]], node))
    return {node.name: info for node, info in zip(graph.nodes, infos)}


def compute_trf(graph, target=None):
    """RFInfo of ``target`` (default: the last spatial node, before any head)."""
    if target is None:
        target = graph.nodes[graph.last_spatial_index()].name
    elif isinstance(target, int):
        target = graph.nodes[target].name
    graph.node(target)
    return compute_all_trf(graph)[target]


# --- coverage ----------------------------------------------------------------

def _spatial_nodes(graph):
    stop = graph.last_spatial_index()
    return graph.nodes[: stop + 1]


def coverage_by_enumeration(graph, input_hw=None, target_position=None):
    """Exact integer coverage counts by enumerating window placements.

    Works backward from an all-ones grid on the last spatial node (or a
    single one at ``target_position``).  Each window op scatters every
    output count onto each input pixel its window touches; elementwise ops
    pass counts through and residual joins send them down both branches.
    """
    nodes = _spatial_nodes(graph)
    shapes = _spatial_shapes(nodes, input_hw)
    counts = [None] * len(nodes)
    last = len(nodes) - 1
    top = np.zeros(shapes[last], dtype=np.int64)
    if target_position is None:
        top[:, :] = 1
    else:
        top[target_position] = 1
    counts[last] = top
    for i in range(last, 0, -1):
        c = counts[i]
        if c is None:
            continue
        node = nodes[i]
        for p, contrib in zip(node.parents, _scatter(node, c, shapes[node.parents[0]])):
            counts[p] = contrib if counts[p] is None else counts[p] + contrib
    return counts[0]


def _scatter(node, c, in_hw):
    if node.op == "add":
        return [c, c]
    if node.op not in WINDOW_OPS:
        return [c]
    k, s = node.layer.kernel, node.layer.stride
    pt, _, pl, _ = node.layer.padding
    h, w = in_hw
    out = np.zeros((h, w), dtype=np.int64)
    ho, wo = c.shape
    for oy in range(ho):
        for ox in range(wo):
            n = c[oy, ox]
            if n == 0:
                continue
            y0 = oy * s - pt
            x0 = ox * s - pl
            ys = slice(max(y0, 0), min(y0 + k, h))
            xs = slice(max(x0, 0), min(x0 + k, w))
            out[ys, xs] += n
    return [out]


def _spatial_shapes(nodes, input_hw):
    from .netspec import layer_output_shape

    shapes = []
    hw = tuple(input_hw) if input_hw is not None else nodes[0].shape[1:]
    for node in nodes:
        if node.op == "input":
            shapes.append(hw)
        elif node.op == "add":
            shapes.append(shapes[node.parents[0]])
        else:
            prev = shapes[node.parents[0]]
            shapes.append(layer_output_shape(node.layer, (1,) + prev)[1:])
    return shapes


def linearize(graph, input_hw=None):
    """Single-channel copy of the spatial part of ``graph`` with all-ones kernels.

    Every conv and pool becomes a bias-free all-ones convolution with the
    same geometry; relu and bn disappear.  The result is a linear map whose
    input gradient of the summed output equals the coverage counts.
    """
    from .netspec import layer_output_shape

    src = _spatial_nodes(graph)
    hw = tuple(input_hw) if input_hw is not None else src[0].shape[1:]
    nodes = [Node("input", "input", (), (1,) + hw)]
    remap = {0: 0}
    for i, node in enumerate(src[1:], start=1):
        if node.op in WINDOW_OPS:
            layer = Layer("conv", node.layer.kernel, node.layer.stride, node.layer.padding, 1, False, node.name)
            parent = remap[node.parents[0]]
            shape = layer_output_shape(layer, nodes[parent].shape)
            w = np.ones((1, 1, layer.kernel, layer.kernel))
            nodes.append(Node(node.name, "conv", (parent,), shape, layer, {"weight": w}))
            remap[i] = len(nodes) - 1
        elif node.op == "add":
            a, b = (remap[p] for p in node.parents)
            nodes.append(Node(node.name, "add", (a, b), nodes[a].shape))
            remap[i] = len(nodes) - 1
        else:
            remap[i] = remap[node.parents[0]]
    return NetGraph(graph.spec, nodes, np.float64)


def coverage_by_gradient(graph, input_hw=None, target_position=None):
    """Coverage counts via reverse-mode differentiation of the linearized graph."""
    lin = linearize(graph, input_hw)
    x = np.ones((1,) + lin.input_shape)
    tape = lin.forward(x)
    seed = np.zeros_like(tape.output)
    if target_position is None:
        seed[...] = 1.0
    else:
        seed[0, 0][target_position] = 1.0
    g = lin.backward(tape, {len(lin.nodes) - 1: seed}, params=False).input
    return g[0, 0]


def coverage_counts(graph, input_shape=None, target_position=None, method="enumerate"):
    """Integer CoverageMap over the input grid.

    ``input_shape`` may be (H, W) or (C, H, W); the graph's own input size
    is used by default.  ``method`` is "enumerate" or "gradient".
    """
    hw = None if input_shape is None else tuple(input_shape)[-2:]
    if method == "enumerate":
        return coverage_by_enumeration(graph, hw, target_position)
    if method == "gradient":
        return np.rint(coverage_by_gradient(graph, hw, target_position)).astype(np.int64)
    raise ValueError(f"unknown coverage method {method!r}")
