"""Executable computation graphs built from an ArchSpec.

A :class:`NetGraph` is a list of nodes in topological order; node 0 is the
input.  ``forward`` returns a :class:`Tape` holding every activation and the
caches needed by ``backward``, so one graph can serve several concurrent
evaluations as long as nobody trains it at the same time.
"""
from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError, WeightFormatError
from .netspec import Layer, ResBlock, layer_output_shape

TRAINABLE = ("weight", "bias", "gamma", "beta")


@dataclass
class Node:
    name: str
    op: str
    parents: tuple
    shape: tuple  # (C, H, W) of this node's output
    layer: Layer | None = None
    params: dict = field(default_factory=dict)

    @property
    def stride(self):
        return (self.layer.stride, self.layer.stride)

    @property
    def kernel(self):
        return (self.layer.kernel, self.layer.kernel)


@dataclass
class Tape:
    mode: str
    values: list
    caches: list
    names: dict

    def __getitem__(self, key):
        return self.values[self.names[key] if isinstance(key, str) else key]

    @property
    def output(self):
        return self.values[-1]


@dataclass
class Gradients:
    input: np.ndarray
    params: dict
    reachable: bool = True


class NetGraph:
    def __init__(self, spec, nodes, dtype=np.float64):
        self.spec = spec
        self.nodes = nodes
        self.dtype = np.dtype(dtype)
        self.index = {n.name: i for i, n in enumerate(nodes)}

    def __repr__(self):
        return f"NetGraph({self.spec.name!r}, {len(self.nodes)} nodes)"

    @property
    def input_shape(self):
        return self.nodes[0].shape

    @property
    def output_shape(self):
        return self.nodes[-1].shape

    def node(self, key):
        if isinstance(key, int):
            return self.nodes[key]
        try:
            return self.nodes[self.index[key]]
        except KeyError:
            raise KeyError(f"graph {self.spec.name!r} has no node {key!r}") from None

    def node_forward(self, key, inputs):
        """Evaluate a single node in eval mode on the given parent activations."""
        return _forward_node(self.nodes[self.node_index(key)], list(inputs), False)[0]

    def node_index(self, key):
        if key is None:
            return len(self.nodes) - 1
        if isinstance(key, int):
            return key % len(self.nodes)
        self.node(key)
        return self.index[key]

    def last_spatial_index(self):
        """Index of the last node before a global pool / fully connected head."""
        head = [False] * len(self.nodes)
        last = 0
        for i, node in enumerate(self.nodes):
            head[i] = node.op in ("gap", "fc") or any(head[p] for p in node.parents)
            if not head[i]:
                last = i
        return last

    def parameters(self):
        """Yield (node, param_name, array) for trainable parameters."""
        for node in self.nodes:
            for pname in TRAINABLE:
                if pname in node.params:
                    yield node, pname, node.params[pname]

    def state(self):
        """Ordered mapping of every stored tensor, keyed ``<node>.<param>``."""
        out = {}
        for node in self.nodes:
            for pname, arr in node.params.items():
                out[f"{node.name}.{pname}"] = arr
        return out

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        g = self.copy()
        g.dtype = np.dtype(dtype)
        for node in g.nodes:
            for pname, arr in node.params.items():
                node.params[pname] = arr.astype(dtype)
        return g

    # --- execution --------------------------------------------------------

    def forward(self, x, mode="eval", upto=None):
        """Run the graph on an (N, C, H, W) batch.

        ``mode`` selects batch statistics ("train") or running statistics
        ("eval") in batch normalization.  ``upto`` stops after the named node.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if isinstance(x, T.Tensor4):
            x = x.data
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}", "input"
            )
        stop = self.node_index(upto)
        train = mode == "train"
        values = [x]
        caches = [None]
        for i in range(1, stop + 1):
            node = self.nodes[i]
            ins = [values[p] for p in node.parents]
            try:
                out, cache = _forward_node(node, ins, train)
            except ShapeError as exc:
                raise ShapeError(str(exc), node.name) from None
            if out.shape[1:] != node.shape:
                raise ShapeError(f"produced {out.shape[1:]}, declared {node.shape}", node.name)
            values.append(out)
            caches.append(cache)
        return Tape(mode, values, caches, {n.name: i for i, n in enumerate(self.nodes[: stop + 1])})

    def backward(self, tape, seeds, params=True, need_input=True):
        """Reverse-mode sweep from seed gradients to the input.

        ``seeds`` maps node name or index to d(scalar)/d(node output).
        Returns the input gradient and, if ``params`` is set, a mapping
        ``{node_name: {param: grad}}``.  With ``need_input=False`` the input
        gradient is skipped (training only needs parameter gradients).
        """
        grads = [None] * len(tape.values)
        for key, g in seeds.items():
            i = self.node_index(key)
            if i >= len(tape.values):
                raise ValueError(f"node {self.nodes[i].name!r} was not evaluated on this tape")
            g = np.asarray(g, dtype=tape.values[i].dtype)
            if g.shape != tape.values[i].shape:
                raise ShapeError(f"seed gradient {g.shape} vs activation {tape.values[i].shape}", self.nodes[i].name)
            grads[i] = g if grads[i] is None else grads[i] + g
        pgrads = {}
        for i in range(len(tape.values) - 1, 0, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            skip = not need_input and node.parents == (0,)
            in_grads, node_pgrads = _backward_node(node, g, tape.caches[i], tape.mode == "train", not skip)
            if params and node_pgrads:
                pgrads[node.name] = node_pgrads
            for p, gp in zip(node.parents, in_grads):
                if gp is not None:
                    grads[p] = gp if grads[p] is None else grads[p] + gp
        if not need_input:
            return Gradients(None, pgrads, True)
        reachable = grads[0] is not None
        if not reachable:
            warnings.warn("selected scalar does not depend on the input; gradient is zero")
            grads[0] = np.zeros_like(tape.values[0])
        return Gradients(grads[0], pgrads, reachable)


def _forward_node(node, ins, train):
    op, p, layer = node.op, node.params, node.layer
    x = ins[0]
    if op == "conv":
        return T.conv2d_forward(x, p["weight"], p.get("bias"), node.stride, layer.padding, keep_columns=train)
    if op == "maxpool":
        return T.maxpool_forward(x, node.kernel, node.stride, layer.padding)
    if op == "avgpool":
        return T.avgpool_forward(x, node.kernel, node.stride, layer.padding)
    if op == "relu":
        return T.relu_forward(x)
    if op == "bn":
        return T.batchnorm_forward(x, p["gamma"], p["beta"], p["running_mean"], p["running_var"], train)
    if op == "fc":
        return T.fc_forward(x, p["weight"], p.get("bias"))
    if op == "gap":
        return T.gap_forward(x)
    if op == "add":
        a, b = ins
        if a.shape != b.shape:
            raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
        return a + b, None
    raise ValueError(f"unknown op {op!r}")


def _backward_node(node, g, cache, train, need_input=True):
    op, p, layer = node.op, node.params, node.layer
    if op == "conv":
        gx, gw, gb = T.conv2d_backward(g, cache, p["weight"], node.stride, layer.padding, "bias" in p, need_input)
        out = {"weight": gw}
        if gb is not None:
            out["bias"] = gb
        return [gx], out
    if op == "maxpool":
        return [T.maxpool_backward(g, cache, node.kernel, node.stride, layer.padding)], None
    if op == "avgpool":
        return [T.avgpool_backward(g, cache, node.kernel, node.stride, layer.padding)], None
    if op == "relu":
        return [T.relu_backward(g, cache)], None
    if op == "bn":
        gx, gg, gb = T.batchnorm_backward(g, cache, p["gamma"])
        return [gx], {"gamma": gg, "beta": gb}
    if op == "fc":
        gx, gw, gb = T.fc_backward(g, cache, p["weight"], "bias" in p)
        out = {"weight": gw}
        if gb is not None:
            out["bias"] = gb
        return [gx], out
    if op == "gap":
        return [T.gap_backward(g, cache)], None
    if op == "add":
        return [g, g], None
    raise ValueError(f"unknown op {op!r}")


# --- scalar selection -------------------------------------------------------

@dataclass(frozen=True)
class Reduction:
    """How a node activation collapses to one scalar per image.

    ``center_channel_mean`` averages channels at the spatial center
    (floor(H/2), floor(W/2)); ``logit_mean`` averages all units;
    ``logit_index`` picks unit ``index`` of a (N, K, 1, 1) logit vector.
    ``position`` overrides the center for ``center_channel_mean``.
    """

    kind: str = "center_channel_mean"
    index: int = 0
    position: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("center_channel_mean", "logit_mean", "logit_index"):
            raise ValueError(f"unknown reduction {self.kind!r}")

    def describe(self):
        if self.kind == "logit_index":
            return f"logit_index({self.index})"
        if self.position is not None:
            return f"channel_mean_at({self.position[0]},{self.position[1]})"
        return self.kind

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if text.startswith("logit_index(") and text.endswith(")"):
            return cls("logit_index", int(text[len("logit_index(") : -1]))
        if text.startswith("channel_mean_at(") and text.endswith(")"):
            i, j = (int(v) for v in text[len("channel_mean_at(") : -1].split(","))
            return cls("center_channel_mean", position=(i, j))
        return cls(text)

    def center(self, shape):
        if self.position is None:
            return shape[-2] // 2, shape[-1] // 2
        i, j = self.position
        if not (0 <= i < shape[-2] and 0 <= j < shape[-1]):
            raise IndexError(f"probe position {self.position} outside {shape[-2]}x{shape[-1]} feature map")
        return i, j

    def _check(self, a):
        if self.kind == "logit_index" and not 0 <= self.index < a.shape[1] * a.shape[2] * a.shape[3]:
            raise IndexError(f"logit index {self.index} out of range for {a.shape[1:]} output")

    def per_sample(self, a):
        self._check(a)
        if self.kind == "center_channel_mean":
            ci, cj = self.center(a.shape)
            return a[:, :, ci, cj].mean(axis=1)
        flat = a.reshape(a.shape[0], -1)
        if self.kind == "logit_mean":
            return flat.mean(axis=1)
        return flat[:, self.index].copy()

    def seed(self, a):
        """d(sum over batch of per-sample scalars)/d(a)."""
        self._check(a)
        g = np.zeros_like(a)
        if self.kind == "center_channel_mean":
            ci, cj = self.center(a.shape)
            g[:, :, ci, cj] = 1.0 / a.shape[1]
        elif self.kind == "logit_mean":
            g[...] = 1.0 / (a.shape[1] * a.shape[2] * a.shape[3])
        else:
            g.reshape(a.shape[0], -1)[:, self.index] = 1.0
        return g


def scalar_reduce(activation, reduction):
    """Collapse an activation to a real; batches are summed over images."""
    a = activation.data if isinstance(activation, T.Tensor4) else np.asarray(activation)
    if isinstance(reduction, str):
        reduction = Reduction.parse(reduction)
    return float(reduction.per_sample(a).sum())


def input_gradient(graph, x, node=None, reduction=Reduction(), mode="eval"):
    """Return (per-sample scalar values, d scalar / d input) for a batch ``x``.

    In eval mode images do not interact, so row ``n`` of the gradient is the
    gradient of image ``n``'s own scalar.
    """
    tape = graph.forward(x, mode=mode, upto=node)
    idx = graph.node_index(node)
    a = tape.values[idx]
    values = reduction.per_sample(a)
    grads = graph.backward(tape, {idx: reduction.seed(a)}, params=False)
    return values, grads.input


# --- building -----------------------------------------------------------------

def _init_params(layer, in_shape, rng, dtype):
    c = in_shape[0]
    if layer.op == "conv":
        fan_in = c * layer.kernel * layer.kernel
        w = rng.standard_normal((layer.channels, c, layer.kernel, layer.kernel)) * np.sqrt(2.0 / fan_in)
        params = {"weight": w.astype(dtype)}
        if layer.bias:
            params["bias"] = np.zeros(layer.channels, dtype=dtype)
        return params
    if layer.op == "fc":
        fan_in = int(np.prod(in_shape))
        w = rng.standard_normal((layer.channels, fan_in)) * np.sqrt(2.0 / fan_in)
        params = {"weight": w.astype(dtype)}
        if layer.bias:
            params["bias"] = np.zeros(layer.channels, dtype=dtype)
        return params
    if layer.op == "bn":
        return {
            "gamma": np.ones(c, dtype=dtype),
            "beta": np.zeros(c, dtype=dtype),
            "running_mean": np.zeros(c, dtype=dtype),
            "running_var": np.ones(c, dtype=dtype),
        }
    return {}


def build_graph(spec, weights=None, seed=0, dtype=np.float64, with_params=True):
    """Instantiate a runnable NetGraph from an ArchSpec.

    Parameters come from ``weights`` (a WeightBundle or a name->array mapping)
    when given; otherwise He-style fan-in normal initialization seeded by
    ``seed`` for conv/fc and unit scale / zero shift for batch norm.
    ``with_params=False`` builds topology and shapes only, which is enough for
    receptive-field arithmetic but cannot be run.
    """
    rng = np.random.default_rng(seed)
    nodes = [Node("input", "input", (), tuple(spec.input_shape))]

    def add_items(items, cur):
        for item in items:
            if isinstance(item, ResBlock):
                main = add_items(item.main, cur)
                short = add_items(item.shortcut, cur)
                shape = nodes[main].shape
                nodes.append(Node(item.name, "add", (main, short), shape))
                cur = len(nodes) - 1
            else:
                in_shape = nodes[cur].shape
                shape = layer_output_shape(item, in_shape)
                params = _init_params(item, in_shape, rng, dtype) if with_params else {}
                nodes.append(Node(item.name, item.op, (cur,), shape, item, params))
                cur = len(nodes) - 1
        return cur

    add_items(spec.layers, 0)
    graph = NetGraph(spec, nodes, dtype)
    if weights is not None:
        load_state(graph, getattr(weights, "tensors", weights))
    return graph


def load_state(graph, tensors):
    """Copy named tensors into ``graph``, checking names and shapes."""
    expected = graph.state()
    for key, arr in expected.items():
        if key not in tensors:
            raise WeightFormatError(f"layer {key.split('.')[0]!r}: missing tensor {key!r}")
        got = np.asarray(tensors[key])
        if got.shape != arr.shape:
            raise WeightFormatError(
                f"layer {key.split('.')[0]!r}: tensor {key!r} has shape {got.shape}, spec needs {arr.shape}"
            )
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise WeightFormatError(f"bundle has tensors not in the spec: {', '.join(extra)}")
    for node in graph.nodes:
        for pname in node.params:
            node.params[pname] = np.array(tensors[f"{node.name}.{pname}"], dtype=graph.dtype)
