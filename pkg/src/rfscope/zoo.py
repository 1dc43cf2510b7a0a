"""Generators for the architecture files bundled under ``rfscope/specs``.

The ResNets follow the torchvision layout: 7x7/2 stem, 3x3/2 max pool, then
four stages whose first block downsamples (stride on the 3x3 convolution for
bottlenecks) with a 1x1/2 projection shortcut.

Run ``python -m rfscope.zoo`` to regenerate the files.
"""
from __future__ import annotations

from pathlib import Path

DEPTHS = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
    152: ("bottleneck", (3, 8, 36, 3)),
}


def _basic(lines, prefix, planes, stride, project):
    lines += [
        f"resblock @{prefix} {{",
        f"    conv 3 {stride} 1 {planes} @{prefix}.conv1",
        f"    bn @{prefix}.bn1",
        f"    relu @{prefix}.relu1",
        f"    conv 3 1 1 {planes} @{prefix}.conv2",
        f"    bn @{prefix}.bn2",
    ]
    if project:
        lines += [
            "    shortcut {",
            f"        conv 1 {stride} 0 {planes} @{prefix}.downsample.0",
            f"        bn @{prefix}.downsample.1",
            "    }",
        ]
    lines += ["}", f"relu @{prefix}.relu"]


def _bottleneck(lines, prefix, planes, stride, project, expansion=4):
    lines += [
        f"resblock @{prefix} {{",
        f"    conv 1 1 0 {planes} @{prefix}.conv1",
        f"    bn @{prefix}.bn1",
        f"    relu @{prefix}.relu1",
        f"    conv 3 {stride} 1 {planes} @{prefix}.conv2",
        f"    bn @{prefix}.bn2",
        f"    relu @{prefix}.relu2",
        f"    conv 1 1 0 {planes * expansion} @{prefix}.conv3",
        f"    bn @{prefix}.bn3",
    ]
    if project:
        lines += [
            "    shortcut {",
            f"        conv 1 {stride} 0 {planes * expansion} @{prefix}.downsample.0",
            f"        bn @{prefix}.downsample.1",
            "    }",
        ]
    lines += ["}", f"relu @{prefix}.relu"]


def resnet_text(depth, input_size=224, width=64, num_classes=1000):
    kind, stages = DEPTHS[depth]
    expansion = 1 if kind == "basic" else 4
    lines = [
        f"# torchvision-style ResNet-{depth}",
        f"name resnet{depth}",
        f"input 3 {input_size} {input_size}",
        f"conv 7 2 3 {width} @conv1",
        "bn @bn1",
        "relu @relu",
        "maxpool 3 2 1 @maxpool",
    ]
    inplanes = width
    for stage, blocks in enumerate(stages):
        planes = width * 2**stage
        for b in range(blocks):
            stride = 2 if stage > 0 and b == 0 else 1
            project = b == 0 and (stride != 1 or inplanes != planes * expansion)
            prefix = f"layer{stage + 1}.{b}"
            if kind == "basic":
                _basic(lines, prefix, planes, stride, project)
            else:
                _bottleneck(lines, prefix, planes, stride, project)
            inplanes = planes * expansion
    lines += ["gap @avgpool", f"fc {num_classes} bias @fc"]
    return "\n".join(lines) + "\n"


def toy_resnet_text(input_size=64, widths=(16, 32, 64), num_classes=2, name="toy_resnet"):
    """Desk-scale ResNet keeping the stride-2 pattern that the padding rule targets."""
    lines = [
        "# desk-scale ResNet: same odd-kernel stride-2 pattern as the torchvision nets",
        f"name {name}",
        f"input 3 {input_size} {input_size}",
        f"conv 7 2 3 {widths[0]} @conv1",
        "bn @bn1",
        "relu @relu",
        "maxpool 3 2 1 @maxpool",
    ]
    inplanes = widths[0]
    for stage, planes in enumerate(widths):
        stride = 1 if stage == 0 else 2
        _basic(lines, f"layer{stage + 1}.0", planes, stride, stride != 1 or inplanes != planes)
        inplanes = planes
    lines += ["gap @avgpool", f"fc {num_classes} bias @fc"]
    return "\n".join(lines) + "\n"


def write_bundled(directory=None):
    directory = Path(directory or Path(__file__).parent / "specs")
    directory.mkdir(parents=True, exist_ok=True)
    for depth in DEPTHS:
        (directory / f"resnet{depth}.spec").write_text(resnet_text(depth), encoding="utf-8")
    (directory / "toy_resnet.spec").write_text(toy_resnet_text(), encoding="utf-8")
    (directory / "toy_resnet_wide.spec").write_text(
        toy_resnet_text(widths=(32, 64, 128), name="toy_resnet_wide"), encoding="utf-8"
    )
    (directory / "three_conv.spec").write_text(
        "# three stacked 3x3 convolutions\nname three_conv\ninput 1 32 32\n"
        "conv 3 1 1 1\nconv 3 1 1 1\nconv 3 1 1 1\n",
        encoding="utf-8",
    )


if __name__ == "__main__":
    write_bundled()
