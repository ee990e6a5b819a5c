"""Finite-difference verification harness for the gradient engine.

Random scenes are rendered under each supported loss and reverse-mode
gradients are compared against central differences, parameter by
parameter. Central differences are only meaningful away from the kinks
of the piecewise-differentiable bilinear kernel, so sampled points whose
finite-difference step would cross a kink (any supported pixel's patch
coordinate within the step's reach of the integer lattice) are flagged;
the sampler draws replacement points away from those loci and reports
how many candidates were rejected.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .compositor import build_pyramid
from .core import ElementSet, PatchLibrary, RgbmImage
from .features import make_fixed_extractor
from .grad import backward, forward_with_tape
from .losses import l2_loss, overlap_loss_from_coverage, style_loss_from_targets, style_targets
from .seeds import SplitMix64, stream

EPS_BY_CLASS = {"type_logits": 1e-4, "center": 1e-3, "orientation": 1e-3,
                "depth": 1e-4, "color": 1e-4,
                "background_color": 1e-4, "background_depth": 1e-4}
REL_TOL = 1e-3
ABS_FLOOR = 1e-8
KINK_SAFETY = 2.0
LOSSES = ("l2", "style", "overlap")


def _random_patch(gen: SplitMix64, size: int) -> RgbmImage:
    data = np.zeros((size, size, 4))
    shape = gen.randint(0, 2)
    yy, xx = np.mgrid[0:size, 0:size]
    cx = (size - 1) / 2.0
    if shape == 0:
        r = size / 2.0 - 0.4
        mask = ((xx - cx) ** 2 + (yy - cx) ** 2) <= r * r
    else:
        mask = (np.abs(xx - cx) <= size / 2.0 - 0.6) & (np.abs(yy - cx) <= size / 2.0 - 1.1)
    base = np.array(gen.uniforms(3, 0.1, 0.9))
    grad_dir = np.array(gen.uniforms(3, -0.3, 0.3))
    ramp = (xx - cx) / size
    data[:, :, :3] = np.clip(base[None, None, :] + ramp[:, :, None] * grad_dir, 0.0, 1.0)
    data[:, :, 3] = mask
    data[:, :, :3] *= mask[:, :, None]
    return RgbmImage(data)


def random_elements(gen: SplitMix64, library: PatchLibrary, canvas,
                    max_elements: int = 5) -> ElementSet:
    """Random element set for a given library; half the poses axis-aligned."""
    m = library.num_types
    n = gen.randint(2, max_elements + 1)
    margin = library.max_footprint_radius() * 0.5 + 2.0
    centers = np.array([[gen.uniform(margin, canvas[0] - margin),
                         gen.uniform(margin, canvas[1] - margin)] for _ in range(n)])
    thetas = np.array([0.0 if gen.uniform() < 0.5 else gen.uniform(0.0, 2.0 * math.pi)
                       for _ in range(n)])
    z0 = 3.3
    depths = np.array([gen.uniform(z0 - 1.0, z0 + 3.0) for _ in range(n)])
    logits = np.array([gen.uniforms(m, -1.0, 1.0) for _ in range(n)]).reshape(n, m)
    colors = np.array([gen.uniforms(3, 0.2, 0.9) for _ in range(n)])
    return ElementSet(type_logits=logits, centers=centers, orientations=thetas,
                      depths=depths, colors=colors, alive=np.ones(n, dtype=bool),
                      background_color=np.array(gen.uniforms(3, 0.1, 0.9)),
                      background_depth=z0)


def random_scene(gen: SplitMix64, max_canvas: int = 64, max_elements: int = 5,
                 max_types: int = 3):
    """A random library plus element set for verification runs."""
    m = gen.randint(1, max_types + 1)
    size = gen.randint(6, 11)
    library = PatchLibrary(patches=tuple(_random_patch(gen, size) for _ in range(m)))
    canvas = (gen.randint(24, max_canvas + 1), gen.randint(24, max_canvas + 1))
    es = random_elements(gen, library, canvas, max_elements=max_elements)
    return es, library, canvas


@dataclass
class LossContext:
    kind: str
    levels: int
    target_pyramid: object = None
    style_stats: object = None
    extractor: object = None
    style_weights: tuple = (0.2, 0.2, 0.2, 0.2)


def make_loss_context(kind: str, gen: SplitMix64, library: PatchLibrary, canvas,
                      levels: int = 4) -> LossContext:
    from .compositor import composite_set
    spacing = float(max(library.sample_spacing))
    if kind == "l2":
        target = composite_set(random_elements(gen, library, canvas), library, canvas)
        return LossContext(kind, levels,
                           target_pyramid=build_pyramid(target, levels, spacing=spacing))
    if kind == "style":
        extractor = make_fixed_extractor(7)
        target = composite_set(random_elements(gen, library, canvas), library, canvas)
        return LossContext(kind, levels, extractor=extractor,
                           style_stats=style_targets(target, extractor))
    if kind == "overlap":
        return LossContext(kind, levels)
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_with_adjoints(ctx: LossContext, element_set: ElementSet,
                       library: PatchLibrary, canvas):
    pyramid, tape = forward_with_tape(element_set, library, canvas, ctx.levels)
    if ctx.kind == "l2":
        lv = l2_loss(ctx.target_pyramid, pyramid)
        return lv.value, lv.level_adjoints, None, tape
    if ctx.kind == "style":
        lv = style_loss_from_targets(ctx.style_stats, pyramid, ctx.extractor,
                                     ctx.style_weights)
        return lv.value, lv.level_adjoints, None, tape
    lv = overlap_loss_from_coverage(tape.scene.cover_sum)
    return lv.value, [None] * ctx.levels, lv.mask_adjoint, tape


def loss_probe(ctx: LossContext, element_set: ElementSet, library: PatchLibrary,
               canvas):
    """Loss value plus a nonsmoothness signature.

    For the style loss the signature is the sign pattern of every
    extractor pre-activation; a finite-difference step whose two probes
    disagree has crossed a rectifier kink and is as unreliable as one
    crossing a bilinear kink.
    """
    pyramid, tape = forward_with_tape(element_set, library, canvas, ctx.levels)
    if ctx.kind == "l2":
        return l2_loss(ctx.target_pyramid, pyramid).value, None
    if ctx.kind == "style":
        from .features import extract_with_tape
        lv = style_loss_from_targets(ctx.style_stats, pyramid, ctx.extractor,
                                     ctx.style_weights)
        _, ftape = extract_with_tape(ctx.extractor, pyramid.levels[0])
        signature = tuple(p.copy() for p in ftape.positive)
        return lv.value, signature
    return overlap_loss_from_coverage(tape.scene.cover_sum).value, None


def _signatures_differ(sig_a, sig_b) -> bool:
    if sig_a is None or sig_b is None:
        return False
    return any(not np.array_equal(a, b) for a, b in zip(sig_a, sig_b))


def loss_value(ctx: LossContext, element_set: ElementSet, library: PatchLibrary,
               canvas) -> float:
    return loss_probe(ctx, element_set, library, canvas)[0]


# ---------------------------------------------------------------------------
# Kink proximity

def _supported_coords(element_set: ElementSet, library: PatchLibrary, canvas, index: int):
    """Patch-space coordinates of canvas pixels inside any type's support,
    plus local element coordinates (for orientation sensitivity)."""
    w, h = int(canvas[0]), int(canvas[1])
    cx, cy = element_set.centers[index]
    theta = element_set.orientations[index]
    rad = library.max_footprint_radius()
    x_lo, x_hi = max(0, int(cx - rad - 1)), min(w, int(cx + rad + 2))
    y_lo, y_hi = max(0, int(cy - rad - 1)), min(h, int(cy + rad + 2))
    ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi].astype(np.float64)
    c, s = math.cos(theta), math.sin(theta)
    ux = c * (xs - cx) + s * (ys - cy)
    uy = -s * (xs - cx) + c * (ys - cy)
    rx, ry = library.sample_spacing
    coords = []
    for patch in library.patches:
        px = ux / rx + (patch.width - 1) / 2.0
        py = uy / ry + (patch.height - 1) / 2.0
        inside = (px > -1.0) & (px < patch.width) & (py > -1.0) & (py < patch.height)
        coords.append((px[inside], py[inside], ux[inside], uy[inside]))
    return coords


def kink_distance(element_set: ElementSet, library: PatchLibrary, canvas,
                  index: int, param: str) -> float:
    """Distance (in finite-difference steps) from the nearest bilinear kink.

    A value below 1.0 means the central-difference step for ``param``
    moves some supported pixel's patch coordinate across the integer
    lattice, so the finite difference is unreliable there. Parameters
    that do not move sample coordinates return +inf.
    """
    if param not in ("center", "orientation"):
        return math.inf
    eps = EPS_BY_CLASS[param]
    rx, ry = library.sample_spacing
    best = math.inf
    for px, py, ux, uy in _supported_coords(element_set, library, canvas, index):
        if px.size == 0:
            continue
        fx = np.abs(px - np.round(px))
        fy = np.abs(py - np.round(py))
        if param == "center":
            sx = eps / min(rx, ry)
            steps = np.minimum(fx, fy) / sx
        else:
            speed = np.hypot(ux, uy) / min(rx, ry)   # |dp/dtheta| bound
            steps = np.minimum(fx, fy) / np.maximum(eps * speed, 1e-300)
        best = min(best, float(steps.min()))
    return best


# ---------------------------------------------------------------------------
# Harness

_PARAM_CLASSES = ("type_logits", "center", "orientation", "depth", "color",
                  "background_color", "background_depth")


def _perturbed(element_set: ElementSet, param: str, index, eps: float, sign: float):
    if param == "background_depth":
        return element_set.with_arrays(
            background_depth=element_set.background_depth + sign * eps)
    name = {"type_logits": "type_logits", "center": "centers",
            "orientation": "orientations", "depth": "depths", "color": "colors",
            "background_color": "background_color"}[param]
    arr = np.array(getattr(element_set, name))
    arr[index] += sign * eps
    return element_set.with_arrays(**{name: arr})


def _analytic_value(grads, param: str, index):
    name = {"type_logits": "d_type_logits", "center": "d_center",
            "orientation": "d_orientation", "depth": "d_depth", "color": "d_color",
            "background_color": "d_background_color",
            "background_depth": "d_background_depth"}[param]
    val = getattr(grads, name)
    return float(val) if param == "background_depth" else float(val[index])


def run_gradcheck(seed: int = 0, scenes: int = 200, points_per_scene: int = 2,
                  losses=LOSSES, max_canvas: int = 64, levels: int = 4,
                  rel_tol: float = REL_TOL, abs_floor: float = ABS_FLOOR) -> dict:
    """Compare backward against central differences on random scenes.

    Points are drawn away from bilinear kink loci (rejected candidates
    are counted); every remaining disagreement is reported with its kink
    distance so failures can be attributed.
    """
    gen = stream(seed, "gradcheck")
    t0 = time.time()
    checks = []
    rejected_bilinear = 0
    rejected_rectifier = 0
    for scene_idx in range(scenes):
        es, lib, canvas = random_scene(gen, max_canvas=max_canvas)
        loss_kind = losses[scene_idx % len(losses)]
        ctx = make_loss_context(loss_kind, gen, lib, canvas, levels=levels)
        value, adjs, mask_adj, tape = loss_with_adjoints(ctx, es, lib, canvas)
        grads = backward(tape, adjs, mask_adjoint=mask_adj)

        picked = 0
        attempts = 0
        while picked < points_per_scene and attempts < 40:
            attempts += 1
            param = _PARAM_CLASSES[gen.randint(0, len(_PARAM_CLASSES))]
            if param == "background_depth":
                index = ()
            elif param == "background_color":
                index = (gen.randint(0, 3),)
            else:
                i = gen.randint(0, es.count)
                if param == "type_logits":
                    index = (i, gen.randint(0, es.num_types))
                elif param == "center":
                    index = (i, gen.randint(0, 2))
                elif param == "color":
                    index = (i, gen.randint(0, 3))
                else:
                    index = (i,)
            if param in ("center", "orientation"):
                steps = kink_distance(es, lib, canvas, index[0], param)
                if steps < KINK_SAFETY:
                    rejected_bilinear += 1
                    continue
            eps = EPS_BY_CLASS[param]
            f_plus, sig_plus = loss_probe(ctx, _perturbed(es, param, index, eps, +1.0),
                                          lib, canvas)
            f_minus, sig_minus = loss_probe(ctx, _perturbed(es, param, index, eps, -1.0),
                                            lib, canvas)
            if _signatures_differ(sig_plus, sig_minus):
                rejected_rectifier += 1
                continue
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = _analytic_value(grads, param, index)
            denom = max(abs(fd), abs(an))
            rel = abs(fd - an) / denom if denom > 0 else 0.0
            ok = rel < rel_tol or abs(fd - an) < abs_floor
            checks.append({
                "scene": scene_idx, "loss": loss_kind, "param": param,
                "rel_error": rel, "abs_error": abs(fd - an), "ok": bool(ok),
                "kink_steps": (kink_distance(es, lib, canvas, index[0], param)
                               if param in ("center", "orientation") else math.inf),
            })
            picked += 1

    by_class: dict = {}
    for c in checks:
        entry = by_class.setdefault(c["param"], {"rel_errors": [], "fails": 0, "count": 0})
        entry["rel_errors"].append(c["rel_error"])
        entry["count"] += 1
        entry["fails"] += 0 if c["ok"] else 1
    summary = {}
    for k, v in by_class.items():
        errs = np.array(v["rel_errors"])
        summary[k] = {"count": v["count"], "fails": v["fails"],
                      "max_rel_error": float(errs.max()),
                      "median_rel_error": float(np.median(errs))}
    fails = [c for c in checks if not c["ok"]]
    return {
        "seed": seed, "scenes": scenes, "points": len(checks),
        "rejected_near_kink": rejected_bilinear,
        "rejected_rectifier_crossing": rejected_rectifier,
        "pass_fraction": 1.0 - len(fails) / max(1, len(checks)),
        "failures": fails,
        "failures_within_kink": all(c["kink_steps"] < KINK_SAFETY * 2 for c in fails),
        "per_class": summary,
        "elapsed_seconds": time.time() - t0,
    }
