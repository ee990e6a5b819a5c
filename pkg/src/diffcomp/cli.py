"""Command-line interface.

Subcommands: decompose, expand, tile, mosaic, render, baseline,
gradcheck, and synth (a synthetic ground-truth scene generator used by
the verification suite). Every run writes a manifest with the resolved
configuration, seed, input hashes and final metrics; identical manifests
reproduce identical outputs byte for byte.

Exit codes: 0 success, 1 usage error, 2 runtime error. Set DIFFCOMP_LOG
to DEBUG/INFO/WARNING to control verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import SearchGrid, greedy_grid_decompose
from .compositor import composite_hard, composite_set, hard_element_stamp
from .core import (DiscreteElement, ElementSet, PatchLibrary, RgbmImage,
                   discrete_elements_from_json, discrete_elements_to_json,
                   element_set_from_json, element_set_to_json, load_json,
                   load_patch_library, read_png_rgbm, save_json, write_png_rgbm)
from .gradcheck import run_gradcheck
from .optimizer import (OptimizationConfig, TaskInputs, desk_preset, paper_preset,
                        run_task, write_trace_csv)
from .seeds import stream

log = logging.getLogger("diffcomp.cli")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# Synthetic ground-truth scenes

def synth_scene(seed: int, library: PatchLibrary, canvas, count: int,
                rotations: str = "none", allow_overlap: bool = True,
                background_color=(0.96, 0.96, 0.93), integer_centers: bool = True,
                depth_base: float = 5.0, depth_gap: float = 0.5,
                orientation_grid: int = 36,
                min_center_distance: float = 0.0) -> list[DiscreteElement]:
    """Deterministic ground-truth scene for tests and benchmarks.

    Rotation modes: "none" (axis-aligned), "random", or "midpoints"
    (angles centered between the cells of an orientation grid, the
    adversarial case for grid search). Depths are distinct with a fixed
    gap so hard and saturated-soft composites agree. Without overlap
    permission, placements are rejection-sampled until masks are
    pairwise disjoint; ``min_center_distance`` bounds how deeply
    overlapping elements may stack while still allowing overlap.
    """
    gen = stream(seed, "synth")
    w, h = int(canvas[0]), int(canvas[1])
    margin = int(math.ceil(library.max_footprint_radius())) + 1
    if 2 * margin >= min(w, h):
        raise ValueError("canvas too small for the patch library")
    placed: list[DiscreteElement] = []
    masks: list[np.ndarray] = []
    depths = list(depth_base + depth_gap * np.arange(count))
    gen.shuffle(depths)
    attempts = 0
    while len(placed) < count:
        attempts += 1
        if attempts > 200 * count:
            raise RuntimeError(
                f"could not place {count} non-overlapping elements in {attempts} attempts")
        type_index = gen.randint(1, library.num_types + 1)
        if rotations == "none":
            theta = 0.0
        elif rotations == "random":
            theta = gen.uniform(0.0, 2.0 * math.pi)
        elif rotations == "midpoints":
            cell = 2.0 * math.pi / orientation_grid
            theta = (gen.randint(0, orientation_grid) + 0.5) * cell
        else:
            raise ValueError(f"unknown rotation mode {rotations!r}")
        if integer_centers and rotations == "none":
            # Snap to the patch's sample phase so axis-aligned placements
            # land patch pixels exactly on canvas pixels (even-sized
            # patches then want half-integer centers).
            patch = library.patches[type_index - 1]
            phase_x = ((patch.width - 1) / 2.0) % 1.0
            phase_y = ((patch.height - 1) / 2.0) % 1.0
            cx = float(gen.randint(margin, w - margin)) + phase_x
            cy = float(gen.randint(margin, h - margin)) + phase_y
        else:
            cx = gen.uniform(margin, w - margin)
            cy = gen.uniform(margin, h - margin)
        el = DiscreteElement(
            type_index=type_index,
            center=(cx, cy), orientation=theta,
            depth=float(depths[len(placed)]), color=(10.0, 10.0, 10.0))
        if min_center_distance > 0 and any(
                math.hypot(cx - p.center[0], cy - p.center[1]) < min_center_distance
                for p in placed):
            continue
        if not allow_overlap:
            _, mask = hard_element_stamp(el, library, canvas)
            if any(np.any(mask & m) for m in masks):
                continue
            masks.append(mask)
        placed.append(el)
    return placed


# ---------------------------------------------------------------------------
# Manifest helpers

def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, args_ns, config_doc: dict,
                    inputs, outputs, timings: dict, metrics: dict) -> Path:
    manifest = {
        "tool": f"diffcomp {__version__}",
        "command": command,
        "seed": getattr(args_ns, "seed", None),
        "config": config_doc,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "timings": timings,
        "metrics": metrics,
    }
    path = out_dir / "manifest.json"
    save_json(path, manifest)
    return path


# ---------------------------------------------------------------------------
# Shared argument plumbing

def _add_common(parser, with_optimizer=True):
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=0,
                        help="cap internal data parallelism (0 = machine default)")
    parser.add_argument("--config", help="key = value config file")
    if with_optimizer:
        parser.add_argument("--preset", choices=("paper", "desk"), default="desk")
        parser.add_argument("--iters", type=int)
        parser.add_argument("--schedule-scale", type=float)
        parser.add_argument("--n-max", type=int)
        parser.add_argument("--levels", type=int)
        parser.add_argument("--no-orientation", action="store_true")
        parser.add_argument("--optimize-color", action="store_true")
        parser.add_argument("--freeze-background", action="store_true")
        parser.add_argument("--lambda-overlap", type=float)
        parser.add_argument("--snapshot-every", type=int)


def _add_library_args(parser):
    parser.add_argument("--patch", action="append", default=[],
                        help="patch PNG; repeat in type order")
    parser.add_argument("--background", default=None,
                        help="background color (#rrggbb) or PNG path")
    parser.add_argument("--spacing", type=float, default=1.0,
                        help="canvas pixels per patch pixel")


def _parse_color(text):
    t = text.lstrip("#")
    if len(t) != 6:
        raise _UsageError(f"expected #rrggbb color, got {text!r}")
    return tuple(int(t[i:i + 2], 16) / 255.0 for i in (0, 2, 4))


def _load_library(args) -> tuple[PatchLibrary, list]:
    if not args.patch:
        raise _UsageError("at least one --patch is required")
    background = (1.0, 1.0, 1.0)
    inputs = list(args.patch)
    if args.background:
        if args.background.lstrip("#").isalnum() and not os.path.exists(args.background) \
                and not args.background.lower().endswith(".png"):
            background = _parse_color(args.background)
        else:
            background = args.background
            inputs.append(args.background)
    lib = load_patch_library(args.patch, background=background,
                             sample_spacing=(args.spacing, args.spacing))
    return lib, inputs


def _parse_config_file(path) -> dict:
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise _UsageError(f"bad config line: {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


_CONFIG_FIELD_TYPES = {
    "n_max": int, "levels": int, "total_iters": int, "schedule_scale": float,
    "base_lr": float, "lambda_overlap": float, "snapshot_every": int,
    "optimize_orientation": lambda v: v.lower() in ("1", "true", "yes"),
    "optimize_color": lambda v: v.lower() in ("1", "true", "yes"),
    "optimize_background": lambda v: v.lower() in ("1", "true", "yes"),
    "extractor_seed": int,
}


def _build_config(args, canvas) -> OptimizationConfig:
    """Precedence: preset defaults < config file < command-line flags."""
    overrides: dict = {}
    if args.config:
        for key, raw in _parse_config_file(args.config).items():
            if key == "preset":
                args.preset = raw
                continue
            if key not in _CONFIG_FIELD_TYPES:
                raise _UsageError(f"unknown config key {key!r}")
            overrides[key] = _CONFIG_FIELD_TYPES[key](raw)
    if args.iters is not None:
        overrides["total_iters"] = args.iters
    if args.schedule_scale is not None:
        overrides["schedule_scale"] = args.schedule_scale
    if args.n_max is not None:
        overrides["n_max"] = args.n_max
    if args.levels is not None:
        overrides["levels"] = args.levels
    if args.no_orientation:
        overrides["optimize_orientation"] = False
    if args.optimize_color:
        overrides["optimize_color"] = True
    if args.freeze_background:
        overrides["optimize_background"] = False
    if args.lambda_overlap is not None:
        overrides["lambda_overlap"] = args.lambda_overlap
    if args.snapshot_every is not None:
        overrides["snapshot_every"] = args.snapshot_every
    overrides["canvas"] = canvas
    preset = paper_preset if args.preset == "paper" else desk_preset
    return preset(**overrides)


def _config_doc(config: OptimizationConfig, preset: str) -> dict:
    doc = {"preset": preset}
    for name in ("n_max", "canvas", "levels", "base_lr", "betas", "lr_type",
                 "lr_center", "lr_orientation", "lr_depth", "lr_color",
                 "position_units", "total_iters", "schedule_scale",
                 "optimize_orientation", "optimize_color", "optimize_background",
                 "lambda_overlap", "extractor_seed", "snapshot_every"):
        val = getattr(config, name)
        doc[name] = list(val) if isinstance(val, tuple) else val
    return doc


def _run_optimization(task: str, args, inputs: TaskInputs, config,
                      extra_inputs, out_dir: Path, metrics_hook=None) -> int:
    t0 = time.time()
    lib = inputs.library

    def snapshot(it, es, pyramid):
        write_png_rgbm(out_dir / f"snapshot_{it:06d}.png",
                       pyramid.levels[0])

    result = run_task(task, inputs, config, snapshot_hook=snapshot)
    elapsed = time.time() - t0

    canvas = config.canvas
    if task in ("decompose", "mosaic") and inputs.target is not None:
        canvas = (inputs.target.width, inputs.target.height)
    soft_path = out_dir / "elements.json"
    save_json(soft_path, element_set_to_json(result.element_set, canvas))
    disc_path = out_dir / "elements_discrete.json"
    save_json(disc_path, discrete_elements_to_json(
        result.discrete, result.element_set.background_color,
        result.element_set.background_depth, canvas))
    cont_png = out_dir / "continuous.png"
    write_png_rgbm(cont_png, result.composite)
    disc_png = out_dir / "discrete.png"
    write_png_rgbm(disc_png, result.discrete_render)
    trace_path = out_dir / "trace.csv"
    write_trace_csv(trace_path, result.trace)

    metrics = {"final_losses": result.final_losses,
               "elements": len(result.discrete),
               "iterations": config.scaled_total_iters()}
    if metrics_hook:
        metrics.update(metrics_hook(result))
    outputs = [soft_path, disc_path, cont_png, disc_png, trace_path]
    _write_manifest(out_dir, task, args, _config_doc(config, args.preset),
                    extra_inputs, outputs, {"seconds": elapsed}, metrics)
    log.info("%s finished in %.1fs: %d elements, losses %s", task, elapsed,
             len(result.discrete), result.final_losses)
    return 0


# ---------------------------------------------------------------------------
# Subcommands

def _cmd_decompose(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lib, lib_inputs = _load_library(args)
    target = read_png_rgbm(args.image, require_alpha=False)
    config = _build_config(args, (target.width, target.height))
    task = TaskInputs(library=lib, target=target)
    return _run_optimization("decompose", args, task, config,
                             lib_inputs + [args.image], out_dir)


def _cmd_mosaic(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lib, lib_inputs = _load_library(args)
    target = read_png_rgbm(args.image, require_alpha=False)
    config = _build_config(args, (target.width, target.height))
    task = TaskInputs(library=lib, target=target)
    return _run_optimization("mosaic", args, task, config,
                             lib_inputs + [args.image], out_dir)


def _cmd_expand(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lib, lib_inputs = _load_library(args)
    exemplar = read_png_rgbm(args.image, require_alpha=False)
    canvas = _parse_canvas(args.canvas)
    config = _build_config(args, canvas)
    task = TaskInputs(library=lib, target=exemplar)
    return _run_optimization("expand", args, task, config,
                             lib_inputs + [args.image], out_dir)


def _cmd_tile(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lib, lib_inputs = _load_library(args)
    exemplar = read_png_rgbm(args.image, require_alpha=False)
    es, canvas = element_set_from_json(load_json(args.elements))
    frozen = np.zeros(es.count, dtype=bool)
    if args.frozen_indices:
        for part in args.frozen_indices.split(","):
            frozen[int(part)] = True
    config = _build_config(args, canvas)
    task = TaskInputs(library=lib, target=exemplar, init_set=es, frozen=frozen)
    return _run_optimization("tile", args, task, config,
                             lib_inputs + [args.image, args.elements], out_dir)


def _cmd_render(args) -> int:
    lib, lib_inputs = _load_library(args)
    doc = load_json(args.elements)
    elems = doc.get("elements", [])
    if elems and "type_logits" in elems[0]:
        es, canvas = element_set_from_json(doc)
        from .optimizer import discretize
        discrete = discretize(es, lib)
        bg = es.background_color
    else:
        discrete, bg, _, canvas = discrete_elements_from_json(doc)
    image = composite_hard(discrete, lib, canvas, background_color=bg)
    write_png_rgbm(args.out, image)
    log.info("rendered %d elements to %s", len(discrete), args.out)
    return 0


def _cmd_baseline(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lib, lib_inputs = _load_library(args)
    target = read_png_rgbm(args.image, require_alpha=False)
    grid = SearchGrid(positions=(target.width, target.height),
                      orientations=args.orientations,
                      use_orientation=args.use_orientation,
                      use_color=args.use_color)
    t0 = time.time()
    found = greedy_grid_decompose(target, lib, grid, args.threshold)
    elapsed = time.time() - t0
    bg = lib.background_color
    disc_path = out_dir / "elements_discrete.json"
    save_json(disc_path, discrete_elements_to_json(
        found, bg, 0.0, (target.width, target.height)))
    render = composite_hard(found, lib, (target.width, target.height))
    png_path = out_dir / "discrete.png"
    write_png_rgbm(png_path, render)
    _write_manifest(out_dir, "baseline", args,
                    {"threshold": args.threshold, "grid": {
                        "positions": list(grid.positions),
                        "orientations": grid.orientations,
                        "use_orientation": grid.use_orientation,
                        "use_color": grid.use_color}},
                    lib_inputs + [args.image], [disc_path, png_path],
                    {"seconds": elapsed}, {"elements": len(found)})
    log.info("baseline found %d elements in %.1fs", len(found), elapsed)
    return 0


def _cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed, scenes=args.scenes,
                           points_per_scene=args.points)
    doc = dict(report)
    doc["failures"] = doc["failures"][:50]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_json(args.out, doc)
    print(json.dumps({k: doc[k] for k in
                      ("points", "pass_fraction", "rejected_near_kink",
                       "rejected_rectifier_crossing", "failures_within_kink",
                       "elapsed_seconds")}, indent=1))
    max_rel = max((v["max_rel_error"] for v in report["per_class"].values()),
                  default=0.0)
    log.info("gradcheck: %d points, pass fraction %.4f, max rel %.2e",
             report["points"], report["pass_fraction"], max_rel)
    return 0


def _parse_canvas(text) -> tuple:
    try:
        w, h = text.lower().split("x")
        return (int(w), int(h))
    except Exception as exc:
        raise _UsageError(f"expected WxH canvas, got {text!r}") from exc


def _cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lib, lib_inputs = _load_library(args)
    canvas = _parse_canvas(args.canvas)
    elements = synth_scene(args.seed, lib, canvas, args.count,
                           rotations=args.rotations,
                           allow_overlap=not args.no_overlap)
    bg = lib.background_color
    json_path = out_dir / "truth.json"
    save_json(json_path, discrete_elements_to_json(elements, bg, 3.3, canvas))
    image = composite_hard(elements, lib, canvas)
    png_path = out_dir / "scene.png"
    write_png_rgbm(png_path, image)
    _write_manifest(out_dir, "synth", args,
                    {"count": args.count, "rotations": args.rotations,
                     "canvas": list(canvas), "no_overlap": args.no_overlap},
                    lib_inputs, [json_path, png_path], {}, {})
    log.info("synthesized %d elements to %s", len(elements), out_dir)
    return 0


# ---------------------------------------------------------------------------
# Entry point

def _build_parser() -> _Parser:
    parser = _Parser(prog="diffcomp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="recover elements from a pattern image")
    p.add_argument("--image", required=True)
    _add_library_args(p)
    _add_common(p)
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("expand", help="synthesize a larger pattern in the exemplar's style")
    p.add_argument("--image", required=True, help="exemplar pattern")
    p.add_argument("--canvas", required=True, help="output canvas WxH")
    _add_library_args(p)
    _add_common(p)
    p.set_defaults(func=_cmd_expand)

    p = sub.add_parser("tile", help="re-style an edited decomposition with frozen elements")
    p.add_argument("--image", required=True, help="style exemplar")
    p.add_argument("--elements", required=True, help="edited element JSON")
    p.add_argument("--frozen-indices", default="",
                   help="comma-separated element indices to keep fixed")
    _add_library_args(p)
    _add_common(p)
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("mosaic", help="reconstruct an image with non-overlapping elements")
    p.add_argument("--image", required=True)
    _add_library_args(p)
    _add_common(p)
    p.set_defaults(func=_cmd_mosaic)

    p = sub.add_parser("render", help="hard-render an element JSON file")
    p.add_argument("--elements", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    _add_library_args(p)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("baseline", help="greedy grid-search decomposition")
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--orientations", type=int, default=36)
    p.add_argument("--use-orientation", action="store_true")
    p.add_argument("--use-color", action="store_true")
    _add_library_args(p)
    _add_common(p, with_optimizer=False)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--points", type=int, default=2)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic ground-truth scene")
    p.add_argument("--canvas", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--rotations", choices=("none", "random", "midpoints"),
                   default="none")
    p.add_argument("--no-overlap", action="store_true")
    _add_library_args(p)
    _add_common(p, with_optimizer=False)
    p.set_defaults(func=_cmd_synth)
    return parser


def _setup_logging():
    level = os.environ.get("DIFFCOMP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _limit_threads(n: int):
    if n <= 0:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        log.debug("threadpoolctl unavailable; --threads recorded but not enforced")


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        _limit_threads(getattr(args, "threads", 0))
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure -> exit 2
        log.debug("traceback", exc_info=True)
        print(f"diffcomp: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
