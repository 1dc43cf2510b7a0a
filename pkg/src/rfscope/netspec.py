"""Line-oriented architecture DSL.

Grammar (one statement per line, ``#`` starts a comment)::

    name    <identifier>
    input   <channels> <height> <width>
    conv    <kernel> <stride> <pad> <out_channels> [bias] [@name]
    maxpool <kernel> <stride> <pad> [@name]
    avgpool <kernel> <stride> <pad> [@name]
    bn | relu | gap [@name]
    fc      <features> [bias] [@name]
    resblock [@name] {
        <main-branch statements>
        shortcut {
            <shortcut statements>     # omitted block = identity shortcut
        }
    }

``<pad>`` is either one integer applied to all four sides or four
comma-separated integers ``top,bottom,left,right``.  Kernels are square.
Names are optional; unnamed layers get ``<op><n>`` with a per-op counter in
document order (``block<n>`` for residual blocks).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

from .errors import SpecError
from .tensor import out_size

WINDOW_OPS = ("conv", "maxpool", "avgpool")
PLAIN_OPS = ("bn", "relu", "gap")
LAYER_OPS = WINDOW_OPS + PLAIN_OPS + ("fc",)


@dataclass(frozen=True)
class Layer:
    op: str
    kernel: int = 0
    stride: int = 1
    padding: tuple = (0, 0, 0, 0)
    channels: int = 0
    bias: bool = False
    name: str = ""

    @property
    def parameterized(self):
        return self.op in ("conv", "fc", "bn")


@dataclass(frozen=True)
class ResBlock:
    main: tuple
    shortcut: tuple = ()
    name: str = ""


Item = Union[Layer, ResBlock]


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def walk(self):
        """Yield every Layer in document order, descending into blocks."""
        yield from _walk(self.layers)

    def blocks(self):
        return [item for item in _walk_items(self.layers) if isinstance(item, ResBlock)]


def _walk_items(items):
    for item in items:
        yield item
        if isinstance(item, ResBlock):
            yield from _walk_items(item.main)
            yield from _walk_items(item.shortcut)


def _walk(items):
    for item in _walk_items(items):
        if isinstance(item, Layer):
            yield item


# --- shape inference -------------------------------------------------------

def layer_output_shape(layer, shape):
    """Return the (C, H, W) produced by ``layer`` on ``shape``; ValueError if invalid."""
    c, h, w = shape
    if layer.op in WINDOW_OPS:
        pt, pb, pl, pr = layer.padding
        ho = out_size(h, layer.kernel, layer.stride, pt, pb)
        wo = out_size(w, layer.kernel, layer.stride, pl, pr)
        if ho < 1 or wo < 1:
            raise ValueError(
                f"{layer.op} kernel {layer.kernel} stride {layer.stride} does not fit {h}x{w} input"
            )
        if layer.op != "conv" and max(layer.padding) >= layer.kernel:
            raise ValueError(f"{layer.op} padding must be smaller than the window")
        return (layer.channels if layer.op == "conv" else c, ho, wo)
    if layer.op == "fc":
        return (layer.channels, 1, 1)
    if layer.op == "gap":
        return (c, 1, 1)
    return shape


def _branch_shape(items, shape):
    for item in items:
        shape = item_output_shape(item, shape)
    return shape


def item_output_shape(item, shape):
    if isinstance(item, Layer):
        return layer_output_shape(item, shape)
    main = _branch_shape(item.main, shape)
    short = _branch_shape(item.shortcut, shape)
    if main != short:
        raise ValueError(f"resblock branches disagree: main {main} vs shortcut {short}")
    return main


def spec_output_shape(spec):
    return _branch_shape(spec.layers, spec.input_shape)


# --- naming ----------------------------------------------------------------

def assign_names(spec):
    """Return a copy of ``spec`` where every layer and block carries a unique name."""
    counters = {}
    taken = {item.name for item in _walk_items(spec.layers) if item.name}

    def fresh(prefix):
        while True:
            counters[prefix] = counters.get(prefix, 0) + 1
            candidate = f"{prefix}{counters[prefix]}"
            if candidate not in taken:
                taken.add(candidate)
                return candidate

    def visit(items):
        out = []
        for item in items:
            if isinstance(item, ResBlock):
                name = item.name or fresh("block")
                out.append(ResBlock(visit(item.main), visit(item.shortcut), name))
            else:
                out.append(item if item.name else replace(item, name=fresh(item.op)))
        return tuple(out)

    return replace(spec, layers=visit(spec.layers))


# --- parsing ---------------------------------------------------------------

def _tokens(line):
    text = line.split("#", 1)[0]
    out = []
    pos = 0
    for raw in text.split():
        pos = text.index(raw, pos)
        out.append((raw, pos + 1))
        pos += len(raw)
    return out


def _int(token, lineno, what, minimum=1):
    raw, col = token
    try:
        value = int(raw)
    except ValueError:
        raise SpecError(f"{what} must be an integer, got {raw!r}", lineno, col) from None
    if value < minimum:
        kind = "positive" if minimum >= 1 else "non-negative"
        raise SpecError(f"{what} must be {kind}, got {value}", lineno, col)
    return value


def _padding(token, lineno):
    raw, col = token
    parts = raw.split(",")
    if len(parts) not in (1, 4):
        raise SpecError(f"padding must be 1 or 4 comma-separated integers, got {raw!r}", lineno, col)
    values = tuple(_int((p, col), lineno, "padding", minimum=0) for p in parts)
    return values * 4 if len(values) == 1 else values


def _split_name(tokens, lineno):
    name = ""
    if tokens and tokens[-1][0].startswith("@"):
        raw, col = tokens.pop()
        name = raw[1:]
        if not name or any(ch in name for ch in "{}@,"):
            raise SpecError(f"invalid layer name {raw!r}", lineno, col)
    return name


def _parse_layer(tokens, lineno):
    op, col = tokens[0]
    name = _split_name(tokens, lineno)
    args = tokens[1:]
    bias = False
    if op in ("conv", "fc") and args and args[-1][0] == "bias":
        bias = True
        args = args[:-1]
    expected = {"conv": 4, "maxpool": 3, "avgpool": 3, "fc": 1}.get(op, 0)
    if len(args) != expected:
        where = args[expected][1] if len(args) > expected else col
        raise SpecError(f"{op} takes {expected} arguments, got {len(args)}", lineno, where)
    if op in WINDOW_OPS:
        kernel = _int(args[0], lineno, "kernel size")
        stride = _int(args[1], lineno, "stride")
        padding = _padding(args[2], lineno)
        channels = _int(args[3], lineno, "channel count") if op == "conv" else 0
        return Layer(op, kernel, stride, padding, channels, bias, name)
    if op == "fc":
        return Layer(op, channels=_int(args[0], lineno, "feature count"), bias=bias, name=name)
    return Layer(op, name=name)


def parse_spec(text):
    """Parse DSL text into a validated, fully named ArchSpec."""
    name = "net"
    input_shape = None
    # stack entries: [kind, items, lineno, extra]; kind in root/resblock/shortcut
    stack = [["root", [], 0, None]]
    positions = {}

    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = _tokens(line)
        if not tokens:
            continue
        head, col = tokens[0]
        frame = stack[-1]

        if head == "}":
            if len(tokens) > 1:
                raise SpecError("unexpected text after '}'", lineno, tokens[1][1])
            if frame[0] == "root":
                raise SpecError("unbalanced '}'", lineno, col)
            stack.pop()
            parent = stack[-1]
            if frame[0] == "shortcut":
                parent[3]["shortcut"] = tuple(frame[1])
            else:
                block = ResBlock(tuple(frame[1]), frame[3].get("shortcut", ()), frame[3]["name"])
                parent[1].append(block)
                positions[id(block)] = (frame[2], 1)
            continue

        if tokens[-1][0] == "{":
            opener = tokens.pop()
            if head == "resblock":
                block_name = _split_name(tokens, lineno)
                if len(tokens) != 1:
                    raise SpecError("resblock takes no arguments", lineno, tokens[1][1])
                stack.append(["resblock", [], lineno, {"name": block_name}])
            elif head == "shortcut":
                if frame[0] != "resblock":
                    raise SpecError("shortcut block only allowed inside resblock", lineno, col)
                if "shortcut" in frame[3]:
                    raise SpecError("duplicate shortcut block", lineno, col)
                if len(tokens) != 1:
                    raise SpecError("shortcut takes no arguments", lineno, tokens[1][1])
                stack.append(["shortcut", [], lineno, None])
            else:
                raise SpecError(f"unknown block {head!r}", lineno, col)
            continue

        if head == "name":
            if len(tokens) != 2 or frame[0] != "root":
                raise SpecError("name takes exactly one argument at top level", lineno, col)
            name = tokens[1][0]
            continue
        if head == "input":
            if input_shape is not None:
                raise SpecError("duplicate input declaration", lineno, col)
            if len(tokens) != 4 or frame[0] != "root":
                raise SpecError("input takes channels, height, width", lineno, col)
            input_shape = tuple(_int(t, lineno, "input dimension") for t in tokens[1:])
            continue
        if head in ("resblock", "shortcut"):
            raise SpecError(f"{head} must open a block with '{{'", lineno, col)
        if head not in LAYER_OPS:
            raise SpecError(f"unknown op {head!r}", lineno, col)
        if input_shape is None:
            raise SpecError("layer declared before input", lineno, col)
        layer = _parse_layer(tokens, lineno)
        frame[1].append(layer)
        positions[id(layer)] = (lineno, col)

    if len(stack) > 1:
        raise SpecError(f"unbalanced '{{' opened here", stack[-1][2], 1)
    if input_shape is None:
        raise SpecError("missing input declaration")

    spec = ArchSpec(name, input_shape, tuple(stack[0][1]))
    _validate(spec, positions)
    named = assign_names(spec)
    _check_unique_names(named)
    return named


def _validate(spec, positions):
    def run(items, shape):
        for item in items:
            try:
                if isinstance(item, ResBlock):
                    main = run(item.main, shape)
                    short = run(item.shortcut, shape)
                    if main != short:
                        raise ValueError(f"resblock branches disagree: main {main} vs shortcut {short}")
                    shape = main
                else:
                    shape = layer_output_shape(item, shape)
            except ValueError as exc:
                line, col = positions.get(id(item), (None, None))
                raise SpecError(f"shape inconsistency: {exc}", line, col) from None
        return shape

    run(spec.layers, spec.input_shape)


def _check_unique_names(spec):
    seen = set()
    for item in _walk_items(spec.layers):
        if item.name in seen:
            raise SpecError(f"duplicate layer name {item.name!r}")
        seen.add(item.name)


# --- printing --------------------------------------------------------------

def _format_padding(padding):
    if len(set(padding)) == 1:
        return str(padding[0])
    return ",".join(str(p) for p in padding)


def format_layer(layer):
    parts = [layer.op]
    if layer.op in WINDOW_OPS:
        parts += [str(layer.kernel), str(layer.stride), _format_padding(layer.padding)]
        if layer.op == "conv":
            parts.append(str(layer.channels))
    elif layer.op == "fc":
        parts.append(str(layer.channels))
    if layer.bias:
        parts.append("bias")
    if layer.name:
        parts.append("@" + layer.name)
    return " ".join(parts)


def format_spec(spec, explicit_names=False):
    """Render an ArchSpec as DSL text.

    Auto-generated names are omitted unless ``explicit_names`` is set; they
    are regenerated identically on reparse.
    """
    auto = assign_names(_strip_names(spec))
    keep_name = {}
    for a, b in zip(_walk_items(auto.layers), _walk_items(spec.layers)):
        keep_name[id(b)] = explicit_names or a.name != b.name

    lines = [f"name {spec.name}", "input {} {} {}".format(*spec.input_shape)]

    def emit(items, depth):
        pad = "    " * depth
        for item in items:
            named = keep_name.get(id(item), True) and item.name
            if isinstance(item, ResBlock):
                lines.append(pad + "resblock" + (f" @{item.name}" if named else "") + " {")
                emit(item.main, depth + 1)
                if item.shortcut:
                    lines.append(pad + "    shortcut {")
                    emit(item.shortcut, depth + 2)
                    lines.append(pad + "    }")
                lines.append(pad + "}")
            else:
                lines.append(pad + format_layer(item if named else replace(item, name="")))

    emit(spec.layers, 0)
    return "\n".join(lines) + "\n"


def _strip_names(spec):
    def visit(items):
        return tuple(
            ResBlock(visit(i.main), visit(i.shortcut), "") if isinstance(i, ResBlock) else replace(i, name="")
            for i in items
        )

    return replace(spec, layers=visit(spec.layers))


def load_spec(path):
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())


def bundled_spec_path(name):
    """Path of a spec shipped with the package (``resnet18`` or ``resnet18.spec``)."""
    from importlib import resources

    fname = name if name.endswith(".spec") else name + ".spec"
    return resources.files("rfscope").joinpath("specs").joinpath(fname)


def resolve_spec(path_or_name):
    """Load a spec from a filesystem path, falling back to the bundled specs."""
    import os

    if os.path.exists(path_or_name):
        return load_spec(path_or_name)
    bundled = bundled_spec_path(os.path.basename(path_or_name))
    if bundled.is_file():
        return parse_spec(bundled.read_text(encoding="utf-8"))
    raise FileNotFoundError(f"no spec file {path_or_name!r}")
