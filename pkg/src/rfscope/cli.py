"""``rfscope`` command line.

Each subcommand reads files, writes its results into ``--out`` and leaves a
``manifest.json`` there that records the arguments, input hashes, seed and
output files.  ``rfscope rerun <manifest>`` replays a run; outputs are
byte-identical because nothing time- or host-dependent is written.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or parse error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import statistics
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .errors import FitError, RFScopeError, SpecError, TrainingDivergedError, WeightFormatError
from .netspec import bundled_spec_path, format_spec, parse_spec

logger = logging.getLogger("rfscope")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(RFScopeError):
    """Malformed input file or inconsistent arguments."""


# --- manifest -------------------------------------------------------------------

@dataclass
class RunManifest:
    subcommand: str
    argv: list
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    version: str = __version__

    def write(self, out_dir):
        path = os.path.join(out_dir, MANIFEST)
        _write_json(path, asdict(self))
        return path

    @classmethod
    def read(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
            return cls(**{f.name: data[f.name] for f in fields(cls) if f.name in data})
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise UsageError(f"{path}: not a run manifest ({exc})") from None


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Run:
    """Collects inputs/outputs of one invocation and emits the manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.out = args.out
        os.makedirs(self.out, exist_ok=True)
        self.inputs = {}
        self.outputs = []
        self.argv = _strip_out(argv)

    def path(self, name):
        self.outputs.append(name)
        return os.path.join(self.out, name)

    def record_input(self, role, label, data):
        self.inputs[role] = {"path": label, "sha256": _sha256(data)}

    def finish(self):
        config = {k: v for k, v in vars(self.args).items() if k not in ("out", "func", "verbose")}
        RunManifest(
            self.args.command, self.argv, config, getattr(self.args, "seed", None), self.inputs, sorted(set(self.outputs))
        ).write(self.out)


def _strip_out(argv):
    """Drop ``--out`` from argv so that a rerun into another directory is identical."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        out.append(tok)
    return out


# --- input helpers --------------------------------------------------------------

def _read_spec(run, ref):
    if os.path.exists(ref):
        with open(ref, encoding="utf-8") as fh:
            text = fh.read()
    else:
        bundled = bundled_spec_path(os.path.basename(ref))
        if not bundled.is_file():
            raise FileNotFoundError(f"no spec file {ref!r}")
        text = bundled.read_text(encoding="utf-8")
    run.record_input("spec", ref, text.encode("utf-8"))
    try:
        return parse_spec(text)
    except SpecError as exc:
        raise SpecError(f"{ref}: {exc.raw_message}", exc.line, exc.column) from None


def _graph(run, args, spec):
    from .graph import build_graph
    from .weights import load_weights

    if getattr(args, "weights", None):
        with open(args.weights, "rb") as fh:
            data = fh.read()
        run.record_input("weights", args.weights, data)
        try:
            bundle = load_weights(data)
        except WeightFormatError as exc:
            raise WeightFormatError(f"{args.weights}: {exc}") from None
        return build_graph(spec, bundle)
    return build_graph(spec, seed=args.seed)


def _read_field(run, path):
    from .imageio import read_field_csv

    with open(path, "rb") as fh:
        run.record_input("erf", path, fh.read())
    try:
        return read_field_csv(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _parse_position(text):
    try:
        i, j = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"position must be 'row,col', got {text!r}") from None
    return i, j


# --- subcommands -----------------------------------------------------------------

def cmd_trf(args, run):
    from .graph import build_graph
    from .rf import compute_all_trf

    spec = _read_spec(run, args.spec)
    graph = build_graph(spec, with_params=False)
    infos = compute_all_trf(graph)
    if args.all:
        names = [n.name for n in graph.nodes]
    elif args.node:
        names = args.node
        for name in names:
            graph.node(name)
    else:
        names = [graph.nodes[graph.last_spatial_index()].name]
    report = {"spec": spec.name, "nodes": {name: infos[name].as_dict() for name in names}}
    _write_json(run.path("trf.json"), report)
    print(f"{'node':<28} {'rf':>6} {'jump':>6} {'offset':>8}")
    for name in names:
        info = infos[name]
        rf = info.rf_size[0] if info.rf_size[0] == info.rf_size[1] else "x".join(map(str, info.rf_size))
        jump = info.jump[0] if info.jump[0] == info.jump[1] else "x".join(map(str, info.jump))
        print(f"{name:<28} {rf!s:>6} {jump!s:>6} {info.start_offset[0]:>8g}")


def cmd_coverage(args, run):
    from .graph import build_graph
    from .imageio import write_field_csv, write_pgm16
    from .rf import coverage_counts

    spec = _read_spec(run, args.spec)
    graph = build_graph(spec, seed=0)
    pos = _parse_position(args.position) if args.position else None
    counts = coverage_counts(graph, args.input_size, pos, method=args.method)
    write_field_csv(run.path("coverage.csv"), counts)
    write_pgm16(run.path("coverage.pgm"), counts)
    m = 2 * max((n.layer.kernel for n in graph.nodes if n.op in ("conv", "maxpool", "avgpool")), default=1)
    interior = counts[m:-m, m:-m] if min(counts.shape) > 2 * m else counts
    summary = {
        "shape": list(counts.shape),
        "min": int(counts.min()),
        "max": int(counts.max()),
        "interior_min": int(interior.min()),
        "interior_max": int(interior.max()),
        "interior_uniform": bool(interior.min() == interior.max()),
        "method": args.method,
    }
    _write_json(run.path("coverage.json"), summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_erf(args, run):
    from .erf import Target, accumulate_erf, load_images, output_target, synthetic_source
    from .graph import Reduction

    spec = _read_spec(run, args.spec)
    graph = _graph(run, args, spec)
    if args.images:
        source = load_images(args.images)
        run.inputs["images"] = {"path": args.images, "sha256": source.ident}
    else:
        source = synthetic_source(args.synthetic, graph.input_shape, seed=args.seed)
    if args.target == "output":
        target = output_target(args.class_mode)
    else:
        pos = _parse_position(args.position) if args.position else None
        target = Target(args.target, Reduction("center_channel_mean", position=pos))
    erf = accumulate_erf(graph, source, target, chunk=args.chunk, provenance={"spec": spec.name, "seed": args.seed})
    prefix = os.path.join(run.out, "erf")
    for p in erf.save(prefix):
        run.outputs.append(os.path.basename(p))
    print(f"ERF of {erf.target['node']} over {erf.n_images} images, peak {erf.values.max():.6g}")


def cmd_fit(args, run):
    from .metrics import fit_gaussian

    field_ = _read_field(run, args.erf)
    fit = fit_gaussian(field_)
    report = fit.as_dict()
    _write_json(run.path("fit.json"), report)
    print(json.dumps(report, sort_keys=True))


def cmd_imbalance(args, run):
    from .metrics import imbalance

    field_ = _read_field(run, args.erf)
    report = imbalance(field_, normalize=args.normalize).as_dict()
    _write_json(run.path("imbalance.json"), report)
    print(json.dumps(report, sort_keys=True))


def cmd_pad(args, run):
    from .transform import PadRule, kernel_pad
    from .weights import save_weights

    spec = _read_spec(run, args.spec)
    graph = _graph(run, args, spec)
    padded = kernel_pad(graph, PadRule())
    prefix = args.out_prefix
    spec_name, weights_name = f"{prefix}.spec", f"{prefix}.rfsw"
    with open(run.path(spec_name), "w", encoding="utf-8") as fh:
        fh.write(format_spec(padded.spec))
    save_weights(padded).save(run.path(weights_name))

    rng = np.random.default_rng(args.seed)
    probes = rng.standard_normal((args.probes,) + graph.input_shape)
    a = graph.forward(probes)
    b = padded.forward(probes)
    layers = []
    for name in padded.modified:
        # each layer in isolation, fed the original graph's activations
        i = graph.node_index(name)
        ins = [a.values[j] for j in graph.nodes[i].parents]
        dev = float(np.abs(padded.node_forward(i, ins) - a.values[i]).max())
        entry = {"name": name, "op": graph.nodes[i].op, "max_deviation": dev}
        if name in padded.non_equivalent:
            entry["note"] = "non-equivalent replacement"
        layers.append(entry)
    report = {
        "layers_modified": len(padded.modified),
        "summary": f"{len(padded.modified)} layers modified",
        "layers": layers,
        "probes": args.probes,
        "max_output_deviation": float(np.abs(a.output - b.output).max()),
        "equivalent": not padded.non_equivalent,
    }
    _write_json(run.path(f"{prefix}_report.json"), report)
    print(report["summary"])
    for entry in layers:
        note = f"  [{entry['note']}]" if "note" in entry else ""
        print(f"  {entry['name']:<28} {entry['op']:<8} max dev {entry['max_deviation']:.3g}{note}")
    print(f"output max deviation over {args.probes} probes: {report['max_output_deviation']:.3g}")


def load_micro_config(path):
    from .netspec import resolve_spec

    if os.path.exists(path):
        with open(path, "rb") as fh:
            raw = fh.read()
    else:
        from importlib import resources

        ref = resources.files("rfscope").joinpath("configs").joinpath(os.path.basename(path))
        if not ref.is_file():
            raise FileNotFoundError(f"no config file {path!r}")
        raw = ref.read_bytes()
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    missing = {"spec", "dataset", "train"} - set(cfg)
    if missing:
        raise UsageError(f"{path}: missing keys {sorted(missing)}")
    bad = set(cfg.get("variants", [])) - {"baseline", "padded"}
    if bad:
        raise UsageError(f"{path}: unknown variants {sorted(bad)}")
    resolve_spec(cfg["spec"])  # fail early on a bad spec reference
    return cfg, raw


def cmd_micro(args, run):
    from .graph import build_graph
    from .micro import MicroDatasetConfig, TrainConfig, epochs_to_threshold, generate_micro_dataset, train
    from .netspec import resolve_spec
    from .transform import kernel_pad_spec

    cfg, raw = load_micro_config(args.config)
    run.record_input("config", args.config, raw)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    n_seeds = args.seeds if args.seeds is not None else int(cfg.get("seeds", 5))
    variants = cfg.get("variants", ["baseline", "padded"])
    threshold = float(cfg.get("threshold", 0.9))
    base_spec = resolve_spec(cfg["spec"])
    specs = {"baseline": base_spec, "padded": kernel_pad_spec(base_spec)[0]}
    data_kw = dict(cfg["dataset"])
    data_kw["image_size"] = tuple(data_kw.get("image_size", (64, 64)))
    try:
        train_cfg = dict(cfg["train"])
        TrainConfig(**train_cfg)
        MicroDatasetConfig(**data_kw)
    except TypeError as exc:
        raise UsageError(f"{args.config}: {exc}") from None

    summary = {"threshold": threshold, "epochs": train_cfg["epochs"], "seeds": [], "variants": {}}
    results = {v: [] for v in variants}
    for k in range(n_seeds):
        seed = args.seed + k
        summary["seeds"].append(seed)
        dataset = generate_micro_dataset(MicroDatasetConfig(**{**data_kw, "seed": seed}))
        for variant in variants:
            graph = build_graph(specs[variant], seed=seed)
            tc = TrainConfig(**{**train_cfg, "seed": seed})
            try:
                log = train(graph, dataset, tc)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"{variant}, seed {seed}: {exc}") from None
            log.to_csv(run.path(f"{variant}_seed{seed}.csv"))
            _write_json(run.path(f"{variant}_seed{seed}.json"), {**log.config, "variant": variant, "spec": specs[variant].name})
            e = epochs_to_threshold(log, threshold, tc.epochs)
            results[variant].append(e)
            logger.info("%s seed %d: %d epochs to %.2f (%.1fs)", variant, seed, e, threshold, log.wall_time)
            print(f"{variant:<9} seed {seed}: epochs to {threshold:.0%} = {e}", flush=True)
    for variant, values in results.items():
        summary["variants"][variant] = {
            "epochs_to_threshold": values,
            "median": float(statistics.median(values)),
            "mean": float(statistics.fmean(values)),
        }
        print(f"{variant:<9} median {statistics.median(values):g}  mean {statistics.fmean(values):.2f}")
    _write_json(run.path("summary.json"), summary)


# --- parser -----------------------------------------------------------------------

def _class_mode(text):
    if text == "mean":
        return "mean"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--class must be 'mean' or an integer, got {text!r}") from None


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="rfscope", description="Receptive-field analysis toolkit")
    parser.add_argument("--version", action="version", version=f"rfscope {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", default=os.path.join("rfscope-out", name), help="output directory")
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness in this command")
        p.set_defaults(func=func)
        return p

    p = add("trf", cmd_trf, "theoretical receptive field per node")
    p.add_argument("--spec", required=True, help="spec file or bundled name (e.g. resnet18)")
    p.add_argument("--node", action="append", help="node name (repeatable); default is the last spatial node")
    p.add_argument("--all", action="store_true", help="report every node")

    p = add("coverage", cmd_coverage, "window-coverage counts over the input grid")
    p.add_argument("--spec", required=True)
    p.add_argument("--input-size", type=_positive, nargs=2, metavar=("H", "W"))
    p.add_argument("--position", help="single output feature 'row,col' instead of the whole grid")
    p.add_argument("--method", choices=("enumerate", "gradient"), default="enumerate")

    p = add("erf", cmd_erf, "effective receptive field over an image set")
    p.add_argument("--spec", required=True)
    p.add_argument("--weights", help="weight bundle; default is seeded random init")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", help="directory of PPM images or an .npy array in [0, 1]")
    src.add_argument("--synthetic", type=_positive, metavar="N", help="N seeded noise images")
    p.add_argument("--target", default="output", help="'output' or a node name")
    p.add_argument("--class", dest="class_mode", type=_class_mode, default="mean", help="output reduction: mean or logit index")
    p.add_argument("--position", help="feature position 'row,col' for a node target (default: center)")
    p.add_argument("--chunk", type=_positive, default=16, help="images per batch")

    p = add("fit", cmd_fit, "2D Gaussian fit of an ERF field")
    p.add_argument("--erf", required=True, help="CSV field")

    p = add("imbalance", cmd_imbalance, "first and second order imbalance indices")
    p.add_argument("--erf", required=True, help="CSV field")
    p.add_argument("--normalize", action="store_true", help="divide the field by its sum first")

    p = add("pad", cmd_pad, "kernel padding with an equivalence report")
    p.add_argument("--spec", required=True)
    p.add_argument("--weights")
    p.add_argument("--out-prefix", default="padded", help="file name prefix inside --out")
    p.add_argument("--probes", type=_positive, default=20)

    p = add("micro", cmd_micro, "micro-object benchmark, baseline vs padded")
    p.add_argument("--config", default="micro_desk.json", help="JSON config or bundled name")
    p.add_argument("--epochs", type=_positive, help="override the epoch budget")
    p.add_argument("--seeds", type=_positive, help="override the number of seeds")
    p.set_defaults(seed=1)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the manifest's directory)")
    p.set_defaults(func=None)
    return parser


def _rerun(args):
    manifest = RunManifest.read(args.manifest)
    argv = list(manifest.argv) + ["--out", args.out or os.path.dirname(os.path.abspath(args.manifest))]
    return main(argv)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(message)s")
    try:
        if args.command == "rerun":
            return _rerun(args)
        run = Run(args, argv)
        args.func(args, run)
        run.finish()
        return EXIT_OK
    except (SpecError, WeightFormatError, UsageError) as exc:
        print(f"rfscope {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FitError, TrainingDivergedError, RFScopeError, OSError, ValueError, IndexError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"rfscope {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
