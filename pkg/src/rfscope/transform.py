"""Kernel padding: turn odd stride-2 windows into even ones.

A matching convolution gets zero rows appended at the bottom of its kernel
and zero columns on the right, and its bottom/right input padding grows by
the same amount.  The output grid is unchanged and, because the new taps are
zero, so is the function.  Matching pools get the larger window with the
same padding change; for max pooling the extra border is -inf, so this is a
replacement rather than an equivalence.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .netspec import Layer, ResBlock


@dataclass(frozen=True)
class PadRule:
    """Which layers to pad and to what size.

    A layer matches when its op is in ``ops``, its stride is in ``strides``
    and its kernel is odd.  ``size_map`` gives the new kernel size; odd sizes
    missing from the map grow by one.
    """

    ops: tuple = ("conv", "maxpool", "avgpool")
    strides: tuple = (2,)
    size_map: dict = field(default_factory=lambda: {7: 8, 3: 4, 1: 2})

    def matches(self, layer):
        return (
            isinstance(layer, Layer)
            and layer.op in self.ops
            and layer.stride in self.strides
            and layer.kernel % 2 == 1
        )

    def new_size(self, kernel):
        size = self.size_map.get(kernel, kernel + 1)
        if size <= kernel:
            raise ValueError(f"size map must enlarge kernels, got {kernel} -> {size}")
        return size


def pad_layer(layer, rule):
    grow = rule.new_size(layer.kernel) - layer.kernel
    pt, pb, pl, pr = layer.padding
    return replace(layer, kernel=layer.kernel + grow, padding=(pt, pb + grow, pl, pr + grow))


def kernel_pad_spec(spec, rule=None):
    """Return ``(padded_spec, modified_layer_names)``; names are preserved."""
    rule = rule or PadRule()
    modified = []

    def visit(items):
        out = []
        for item in items:
            if isinstance(item, ResBlock):
                out.append(ResBlock(visit(item.main), visit(item.shortcut), item.name))
            elif rule.matches(item):
                out.append(pad_layer(item, rule))
                modified.append(item.name)
            else:
                out.append(item)
        return tuple(out)

    return replace(spec, layers=visit(spec.layers)), modified


def kernel_pad(graph, rule=None):
    """Apply kernel padding to a built graph, keeping its trained weights.

    The returned graph carries ``modified`` (names of changed layers) and
    ``non_equivalent`` (changed pooling layers, whose function may differ).
    """
    rule = rule or PadRule()
    spec, modified = kernel_pad_spec(graph.spec, rule)
    out = graph.copy()
    out.spec = spec
    changed = set(modified)
    non_equivalent = []
    for node in out.nodes:
        if node.name not in changed:
            continue
        new_layer = pad_layer(node.layer, rule)
        if node.op == "conv":
            w = node.params["weight"]
            grow = new_layer.kernel - node.layer.kernel
            node.params["weight"] = np.pad(w, ((0, 0), (0, 0), (0, grow), (0, grow)))
        else:
            non_equivalent.append(node.name)
        node.layer = new_layer
    out.modified = modified
    out.non_equivalent = non_equivalent
    return out


def is_padding_target(graph, rule=None):
    rule = rule or PadRule()
    return [n.name for n in graph.nodes if n.layer is not None and rule.matches(n.layer)]
