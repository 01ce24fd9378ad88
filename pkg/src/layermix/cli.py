"""Command-line entry points.

    layermix phantom   generate phantom image/label files
    layermix augment   shuffle | displace, with a replayable JSON manifest
    layermix train     toy teacher-student run -> loss CSV, history CSV, parameter snapshot
    layermix eval      per-class Dice / ASD CSV for a prediction against a reference
    layermix montage   mid-slice rasters (PGM for images, PPM for label maps)

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error.
The default seed comes from LAYERMIX_SEED when set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import displace as cgd
from .grid import Axis, ShapeError
from .metrics import evaluate
from .model import SegmentorParams
from .phantom import ClassSpec, PhantomSpec, SpecError, default_spec, generate_dataset
from .shuffle import ShufflePlan, choose_axis, recover_batch, shuffle_batch
from .trainer import MODES, LossReport, TrainConfig, phantom_dataset, run_training
from .volume_file import FormatError, Kind, atomic_write, csv_text, read_volume, write_volume

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3

PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
], dtype=np.uint8)


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    raw = os.environ.get("LAYERMIX_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"LAYERMIX_SEED must be an integer, got {raw!r}") from None


def _write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_path(out_dir: Path, src: str) -> Path:
    return out_dir / Path(src).name


def _load_all(paths):
    files = [read_volume(p) for p in paths]
    kinds = {f.kind for f in files}
    if len(kinds) != 1:
        raise ConfigError("all inputs of one command must share a grid kind")
    return files


# -- phantom ------------------------------------------------------------------

def load_phantom_spec(path) -> PhantomSpec:
    """PhantomSpec from JSON: top-level PhantomSpec fields with ``classes`` as a list of objects."""
    with open(path) as fh:
        raw = json.load(fh)
    try:
        classes = tuple(ClassSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
                        for c in raw.pop("classes"))
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
        if "layer_axis" in fields:
            fields["layer_axis"] = Axis.parse(fields["layer_axis"])
        spec = PhantomSpec(classes=classes, **fields)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad phantom spec {path}: {exc}") from None
    spec.validate()
    return spec


def cmd_phantom(args) -> int:
    spec = load_phantom_spec(args.spec) if args.spec else default_spec(args.size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (vol, lab) in enumerate(generate_dataset(spec, args.count, args.seed)):
        write_volume(out / f"case_{i:03d}_image.jnv", vol, Kind.IMAGE)
        write_volume(out / f"case_{i:03d}_label.jnv", lab, Kind.LABEL, spec.num_classes)
    return EXIT_OK


# -- augment ------------------------------------------------------------------

def _plan_from_manifest(path) -> ShufflePlan:
    with open(path) as fh:
        m = json.load(fh)
    if m.get("op") != "shuffle":
        raise ConfigError(f"{path} is not a shuffle manifest")
    return ShufflePlan.from_matrix(m["axis"], m["p"], m["matrix"])


def cmd_shuffle(args) -> int:
    files = _load_all(args.inputs)
    grids = np.stack([f.data for f in files])
    if args.manifest:
        plan = _plan_from_manifest(args.manifest)
    else:
        if args.recover:
            raise ConfigError("--recover needs --manifest")
        if args.p is None:
            raise ConfigError("--p is required")
        rng = np.random.default_rng(args.seed)
        axis = choose_axis(rng) if args.axis == "random" else Axis.parse(args.axis)
        plan = ShufflePlan.sample(rng, len(files), grids.shape[1 + int(axis)], axis, args.p)
    out_grids = recover_batch(grids, plan) if args.recover else shuffle_batch(grids, plan)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f, src, g in zip(files, args.inputs, out_grids):
        write_volume(_out_path(out, src), g, f.kind, f.class_count)
    if not args.manifest:
        _write_json(out / "manifest.json", {
            "op": "shuffle", "seed": args.seed, "axis": plan.axis.name, "p": plan.p,
            "matrix": plan.matrix.tolist(), "inverse": plan.inverse.tolist(),
            "inputs": [Path(s).name for s in args.inputs],
        })
    return EXIT_OK


STREAM_FIELDS = (("volumes", Kind.IMAGE), ("labels", Kind.LABEL),
                 ("confidence", Kind.CONFIDENCE), ("supervision", Kind.SUPERVISION))


def _stream_files(args):
    paths = {}
    for name, _ in STREAM_FIELDS:
        weak, strong = getattr(args, f"weak_{name}"), getattr(args, f"strong_{name}")
        if len(weak) != len(strong) or len(weak) != len(args.weak_volumes):
            raise ConfigError(f"--weak-{name} and --strong-{name} need one file per case")
        paths[name] = (weak, strong)
    return paths


def cmd_displace(args) -> int:
    paths = _stream_files(args)
    loaded, meta = {}, {}
    for name, kind in STREAM_FIELDS:
        weak = [read_volume(p) for p in paths[name][0]]
        strong = [read_volume(p) for p in paths[name][1]]
        for f in weak + strong:
            if f.kind is not kind:
                raise ConfigError(f"expected {kind.name.lower()} files for {name}, got {f.kind.name.lower()}")
        loaded[name] = np.stack([np.stack([w.data, s.data]) for w, s in zip(weak, strong)])
        meta[name] = [(w.class_count, s.class_count) for w, s in zip(weak, strong)]
    stack = cgd.StreamStack(loaded["volumes"], loaded["labels"].astype(np.int64),
                            loaded["confidence"].astype(np.float64), loaded["supervision"].astype(np.int64))
    if args.manifest:
        with open(args.manifest) as fh:
            m = json.load(fh)
        if m.get("op") != "displace":
            raise ConfigError(f"{args.manifest} is not a displace manifest")
        axis, p, n, k = Axis.parse(m["axis"]), m["p"], m["n"], m["k"]
        dec = cgd.patchify(stack, axis, p, n)
        mask = np.asarray(m["swapped"], dtype=bool)
        moved = cgd.swap_with_mask(dec, mask)
    else:
        if args.p is None:
            raise ConfigError("--p is required")
        rng = np.random.default_rng(args.seed)
        axis = choose_axis(rng) if args.axis == "random" else Axis.parse(args.axis)
        p, n, k = args.p, args.n, args.k
        dec = cgd.patchify(stack, axis, p, n)
        stats = cgd.compute_stats(dec)
        selected = cgd.topk_select(cgd.confidence_gap(stats), k)
        mask = cgd.swap_mask(stats, selected)
        moved = cgd.displace_patches(dec, stats, selected)
    result = cgd.unpatchify(moved)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, kind in STREAM_FIELDS:
        grids = getattr(result, name)
        for b in range(grids.shape[0]):
            for s, side in enumerate(("weak", "strong")):
                src = paths[name][s][b]
                write_volume(_out_path(out, src), grids[b, s], kind, meta[name][b][s])
    if not args.manifest:
        _write_json(out / "manifest.json", {
            "op": "displace", "seed": args.seed, "axis": axis.name, "p": p, "n": n, "k": k,
            "swapped": mask.astype(int).tolist(), "swaps": int(mask.sum()),
        })
    return EXIT_OK


# -- train / eval / montage -----------------------------------------------------

def _train_config(args) -> TrainConfig:
    if args.p is None:
        raise ConfigError("--p is required")
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    kw = {k: v for k, v in vars(args).items() if k in fields and v is not None}
    kw["max_iters"] = args.iters
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def params_snapshot(state) -> dict:
    return {
        "num_classes": state.num_classes,
        "iteration": state.iteration,
        # repr-based JSON floats round-trip exactly
        "student": {"weight": state.student.weight.tolist(), "bias": state.student.bias.tolist()},
        "teacher": {"weight": state.teacher.weight.tolist(), "bias": state.teacher.bias.tolist()},
    }


def load_params(path, which: str = "student") -> SegmentorParams:
    with open(path) as fh:
        snap = json.load(fh)[which]
    return SegmentorParams(np.array(snap["weight"], dtype=np.float64), np.array(snap["bias"], dtype=np.float64))


def cmd_train(args) -> int:
    cfg = _train_config(args)
    spec = load_phantom_spec(args.phantom_spec) if args.phantom_spec else default_spec(args.size)
    data = phantom_dataset(spec, args.n_train, args.labeled_fraction, args.n_heldout, seed=args.data_seed)
    state, reports, history = run_training(cfg, data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "losses.csv", csv_text(LossReport.FIELDS, [dataclasses.asdict(r) for r in reports]))
    atomic_write(out / "history.csv", csv_text(("iteration", "dice"), history))
    _write_json(out / "params.json", params_snapshot(state))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, ref = read_volume(args.pred), read_volume(args.ref)
    if pred.kind is not Kind.LABEL or ref.kind is not Kind.LABEL:
        raise ConfigError("eval compares two label files")
    if pred.data.shape != ref.data.shape:
        raise ConfigError(f"shape mismatch {pred.data.shape} vs {ref.data.shape}")
    k = args.classes or max(pred.class_count, ref.class_count)
    report = evaluate(pred.data, ref.data, k, include_background=args.background)
    rows = [{"class": c, "dice": report.dice[c], "asd": report.asd[c]} for c in report.dice]
    atomic_write(args.out, csv_text(("class", "dice", "asd"), rows))
    return EXIT_OK


def _raster(path: Path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    if image.ndim == 2:
        atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + image.astype(np.uint8).tobytes())
    else:
        atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + image.astype(np.uint8).tobytes())


def mid_slice(grid: np.ndarray, axis: Axis, index: int | None = None) -> np.ndarray:
    index = grid.shape[axis] // 2 if index is None else index
    if not 0 <= index < grid.shape[axis]:
        raise ConfigError(f"slice {index} outside axis {axis.name} of extent {grid.shape[axis]}")
    return np.take(grid, index, axis=int(axis))


def to_gray(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255).astype(np.uint8)


def to_color(plane: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(plane, dtype=np.int64) % len(PALETTE)]


def cmd_montage(args) -> int:
    vf = read_volume(args.input)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for name in args.axes:
        axis = Axis.parse(name)
        plane = mid_slice(vf.data, axis, args.index)
        if vf.kind in (Kind.LABEL, Kind.SUPERVISION):
            _raster(out / f"{stem}_{axis.name}.ppm", to_color(plane))
        else:
            _raster(out / f"{stem}_{axis.name}.pgm", to_gray(plane))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layermix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="write phantom image/label files")
    ph.add_argument("--out-dir", required=True)
    ph.add_argument("--count", type=int, default=1)
    ph.add_argument("--size", type=int, default=24)
    ph.add_argument("--spec", help="phantom spec JSON (overrides --size)")
    ph.add_argument("--seed", type=int, default=None)
    ph.set_defaults(func=cmd_phantom)

    aug = sub.add_parser("augment", help="slice-block shuffle or patch displacement")
    asub = aug.add_subparsers(dest="op", required=True)

    sh = asub.add_parser("shuffle", help="shuffle 2B same-kind files; --recover inverts a manifest")
    sh.add_argument("inputs", nargs="+")
    sh.add_argument("--out-dir", required=True)
    sh.add_argument("--axis", default="random", choices=["random", "D", "H", "W"])
    sh.add_argument("--p", type=int)
    sh.add_argument("--seed", type=int, default=None)
    sh.add_argument("--manifest", help="replay this plan instead of sampling one")
    sh.add_argument("--recover", action="store_true", help="apply the inverse of --manifest")
    sh.set_defaults(func=cmd_shuffle)

    dp = asub.add_parser("displace", help="confidence-guided patch swap between weak and strong files")
    for name, _ in STREAM_FIELDS:
        flag = name.replace("_", "-")
        dp.add_argument(f"--weak-{flag}", nargs="+", required=True, dest=f"weak_{name}")
        dp.add_argument(f"--strong-{flag}", nargs="+", required=True, dest=f"strong_{name}")
    dp.add_argument("--out-dir", required=True)
    dp.add_argument("--axis", default="random", choices=["random", "D", "H", "W"])
    dp.add_argument("--p", type=int)
    dp.add_argument("--n", type=int, default=2)
    dp.add_argument("--k", type=int, default=2)
    dp.add_argument("--seed", type=int, default=None)
    dp.add_argument("--manifest", help="replay the swap mask of a manifest (applied twice it restores)")
    dp.set_defaults(func=cmd_displace)

    tr = sub.add_parser("train", help="toy teacher-student training on phantoms")
    tr.add_argument("--out-dir", required=True)
    tr.add_argument("--p", type=int)
    tr.add_argument("--iters", type=int, required=True)
    tr.add_argument("--mode", choices=sorted(MODES), default="full")
    tr.add_argument("--axis", default="random", choices=["random", "D", "H", "W"])
    tr.add_argument("--n", type=int)
    tr.add_argument("--k", type=int)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lambda-disp", type=float)
    tr.add_argument("--rampup-iters", type=int)
    tr.add_argument("--lambda-u-max", type=float)
    tr.add_argument("--ema-decay", type=float)
    tr.add_argument("--base-lr", type=float)
    tr.add_argument("--lr-pow", type=float)
    tr.add_argument("--sbs-loss", choices=["dice", "ce_dice"])
    tr.add_argument("--eval-interval", type=int)
    tr.add_argument("--size", type=int, default=24)
    tr.add_argument("--phantom-spec")
    tr.add_argument("--n-train", type=int, default=10)
    tr.add_argument("--labeled-fraction", type=float, default=0.2)
    tr.add_argument("--n-heldout", type=int, default=6)
    tr.add_argument("--data-seed", type=int, default=1000)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="per-class Dice and ASD CSV")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--classes", type=int, help="class count including background")
    ev.add_argument("--background", action="store_true", help="also report class 0")
    ev.set_defaults(func=cmd_eval)

    mo = sub.add_parser("montage", help="mid-slice raster per axis")
    mo.add_argument("input")
    mo.add_argument("--out-dir", required=True)
    mo.add_argument("--axes", nargs="+", default=["D", "H", "W"], choices=["D", "H", "W"])
    mo.add_argument("--index", type=int, help="slice index (default: middle)")
    mo.set_defaults(func=cmd_montage)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = default_seed()
        return args.func(args)
    except (ConfigError, ShapeError, SpecError, cgd.ConsistencyError) as exc:
        print(f"layermix: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"layermix: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"layermix: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
