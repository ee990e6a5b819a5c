"""Exact reverse-mode derivatives of the soft composite.

The compositing graph is fixed and shallow (type softmax -> bilinear
patch sampling -> color scaling -> depth-softmax blend -> pyramid), so
the adjoints are written out by hand and fused per element window
instead of going through a generic autodiff graph. The forward pass
reuses the compositor's window renderer unchanged, so taped composites
are bit-identical to plain renders.

Adjoint routes accepted by ``backward``:

* per-pyramid-level RGB adjoint images (losses on the composite), and
* an optional full-resolution per-layer mask adjoint, applied uniformly
  to every element's coverage mask (used by the overlap loss, which acts
  on layer masks rather than on the blended image).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import compositor
from .compositor import (SceneRender, blur_decimate_matrix, build_pyramid,
                         color_response_deriv, pyramid_level_shapes,
                         render_scene)
from .core import ElementSet, PatchLibrary, RgbmImage


@dataclass
class ParamGradients:
    """Derivatives mirroring an ElementSet's parameter arrays."""

    d_type_logits: np.ndarray     # (n, m)
    d_center: np.ndarray          # (n, 2)
    d_orientation: np.ndarray     # (n,)
    d_depth: np.ndarray           # (n,)
    d_color: np.ndarray           # (n, 3)
    d_background_color: np.ndarray
    d_background_depth: float

    @staticmethod
    def zeros(n: int, m: int) -> "ParamGradients":
        return ParamGradients(
            d_type_logits=np.zeros((n, m)), d_center=np.zeros((n, 2)),
            d_orientation=np.zeros(n), d_depth=np.zeros(n),
            d_color=np.zeros((n, 3)), d_background_color=np.zeros(3),
            d_background_depth=0.0)

    def check_finite(self) -> None:
        for name in ("d_type_logits", "d_center", "d_orientation", "d_depth", "d_color",
                     "d_background_color"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))
                raise ValueError(f"non-finite gradient in {name} at {bad[0].tolist()}")
        if not math.isfinite(self.d_background_depth):
            raise ValueError("non-finite gradient in d_background_depth")


@dataclass
class GradientTape:
    """Everything one backward pass needs from one forward composite."""

    element_set: ElementSet
    library: PatchLibrary
    canvas: tuple
    levels: int
    spacing: float
    scene: SceneRender


def forward_with_tape(element_set: ElementSet, library: PatchLibrary, canvas,
                      levels: int):
    """Soft composite + pyramid, recording intermediates for backward."""
    spacing = float(max(library.sample_spacing))
    scene = render_scene(element_set, library, canvas, keep_intermediates=True)
    pyramid = build_pyramid(RgbmImage(scene.image), levels, spacing=spacing)
    tape = GradientTape(element_set=element_set, library=library,
                        canvas=(int(canvas[0]), int(canvas[1])), levels=levels,
                        spacing=spacing, scene=scene)
    return pyramid, tape


def pyramid_backward(level_adjoints, canvas, levels: int, spacing: float) -> np.ndarray:
    """Collapse per-level adjoints into a full-resolution adjoint image.

    Blur adjoint is correlation with the same symmetric kernel; the
    decimation adjoint is zero-stuffing. Both are realized by the
    transposed level matrices.
    """
    shapes = pyramid_level_shapes(canvas, levels)
    if len(level_adjoints) != levels:
        raise ValueError(f"expected {levels} level adjoints, got {len(level_adjoints)}")
    acc = None
    for k in range(levels - 1, -1, -1):
        adj = level_adjoints[k]
        h, w = shapes[k]
        if adj is None:
            adj = np.zeros((h, w, 3))
        adj = np.asarray(adj, dtype=np.float64)
        if adj.shape != (h, w, 3):
            raise ValueError(f"level {k} adjoint has shape {adj.shape}, expected {(h, w, 3)}")
        total = adj if acc is None else adj + acc
        if k == 0:
            return total
        hp, wp = shapes[k - 1]
        dy = blur_decimate_matrix(hp, spacing)
        dx = blur_decimate_matrix(wp, spacing)
        ch = total.transpose(2, 0, 1)
        acc = np.matmul(np.matmul(dy.T, ch), dx).transpose(1, 2, 0)
    return np.zeros(shapes[0] + (3,))


def backward(tape: GradientTape, level_adjoints, mask_adjoint=None) -> ParamGradients:
    """Reverse-mode derivatives of sum_k <adjoint_k, level_k> (+ the mask
    route) with respect to every element and background parameter."""
    es = tape.element_set
    lib = tape.library
    sc = tape.scene
    w, h = tape.canvas
    grads = ParamGradients.zeros(es.count, es.num_types)

    g_full = pyramid_backward(level_adjoints, tape.canvas, tape.levels, tape.spacing)

    den = sc.den.reshape(-1)
    img = sc.image.reshape(-1, 4)
    g_flat = g_full.reshape(-1, 3)

    # Background adjoints (full canvas; M_0 == 1 everywhere).
    v0 = sc.exp0 / den
    grads.d_background_color = (g_flat * v0[:, None]).sum(axis=0)
    diff0 = es.background_color[None, :] - img[:, :3]
    grads.d_background_depth = float((v0 * (g_flat * diff0).sum(axis=1)).sum())

    nl = sc.live.size
    if nl == 0:
        return grads

    mask_adj_flat = None
    if mask_adjoint is not None:
        mask_adjoint = np.asarray(mask_adjoint, dtype=np.float64)
        if mask_adjoint.shape != (h, w):
            raise ValueError(f"mask adjoint has shape {mask_adjoint.shape}, expected {(h, w)}")
        mask_adj_flat = mask_adjoint.reshape(-1)

    if sc.flat is None:
        raise ValueError("tape was recorded without intermediates")
    side = sc.side
    flat = sc.flat
    valid = sc.valid
    ux = sc.local_x
    uy = sc.local_y

    gw = g_flat[flat] * valid[:, :, None]          # (nl, S^2, 3)
    denw = den[flat]
    iw = img[flat][:, :, :3]
    madjw = (mask_adj_flat[flat] * valid) if mask_adj_flat is not None else None

    live = sc.live
    cth = np.cos(es.orientations[live])[:, None]
    sth = np.sin(es.orientations[live])[:, None]
    rx, ry = lib.sample_spacing

    # Spatial derivatives of the per-type samples (corner values are on
    # the tape, so no re-gathering happens here).
    m = lib.num_types
    samples = sc.samples
    sample_dx = []
    sample_dy = []
    for corners in sc.corners:
        dvx, dvy = compositor._corners_grad(*corners)
        sample_dx.append(dvx)
        sample_dy.append(dvy)

    probs = sc.probs
    mixed = sc.mixed
    m_ch = mixed[:, :, 3]
    j_rgb = mixed[:, :, :3] * sc.nu[:, None, :]

    a = sc.expz[:, None] * m_ch
    v = a / denw
    d_j = v[:, :, None] * gw                                   # dL/dJ_rgb
    d_a = (gw * (j_rgb - iw)).sum(axis=2) / denw               # dL/d(e^z M)
    d_depth = sc.expz * (d_a * m_ch).sum(axis=1)
    d_mask = sc.expz[:, None] * d_a
    if madjw is not None:
        d_mask = d_mask + madjw

    d_nu = (d_j * mixed[:, :, :3]).sum(axis=1)                 # (nl, 3)
    d_color = d_nu * color_response_deriv(es.colors[live])

    d_mixed = np.empty((nl, side * side, 4))
    d_mixed[:, :, :3] = d_j * sc.nu[:, None, :]
    d_mixed[:, :, 3] = d_mask

    d_probs = np.empty((nl, m))
    dpx_tot = np.zeros((nl, side * side))
    dpy_tot = np.zeros((nl, side * side))
    for j in range(m):
        d_probs[:, j] = np.einsum("npc,npc->n", d_mixed, samples[j])
        dpx_tot += probs[:, j, None] * np.einsum("npc,npc->np", d_mixed, sample_dx[j])
        dpy_tot += probs[:, j, None] * np.einsum("npc,npc->np", d_mixed, sample_dy[j])
    inner = (d_probs * probs).sum(axis=1, keepdims=True)
    d_logits = probs * (d_probs - inner)

    dux = dpx_tot / rx
    duy = dpy_tot / ry
    sum_dux = dux.sum(axis=1)
    sum_duy = duy.sum(axis=1)
    c1 = cth[:, 0]
    s1 = sth[:, 0]
    d_cx = -(c1 * sum_dux - s1 * sum_duy)
    d_cy = -(s1 * sum_dux + c1 * sum_duy)
    d_theta = (dux * uy - duy * ux).sum(axis=1)

    grads.d_type_logits[live] = d_logits
    grads.d_center[live, 0] = d_cx
    grads.d_center[live, 1] = d_cy
    grads.d_orientation[live] = d_theta
    grads.d_depth[live] = d_depth
    grads.d_color[live] = d_color
    return grads


# ---------------------------------------------------------------------------
# Finite-difference oracle

def finite_diff_gradients(loss_fn, element_set: ElementSet,
                          eps_center: float = 1e-3, eps_theta: float = 1e-3,
                          eps_depth: float = 1e-4, eps_logit: float = 1e-4,
                          eps_color: float = 1e-4) -> ParamGradients:
    """Central differences of an arbitrary scene loss, one scalar at a time.

    Deliberately independent of the taped backward pass: the only shared
    code is the ElementSet container itself.
    """
    n, m = element_set.count, element_set.num_types
    out = ParamGradients.zeros(n, m)

    def ev(**arrays):
        return loss_fn(element_set.with_arrays(**arrays))

    def central(name, base, idx, eps):
        plus = np.array(base)
        minus = np.array(base)
        plus[idx] += eps
        minus[idx] -= eps
        return (ev(**{name: plus}) - ev(**{name: minus})) / (2.0 * eps)

    for i in range(n):
        if not element_set.alive[i]:
            continue
        for j in range(m):
            out.d_type_logits[i, j] = central("type_logits", element_set.type_logits, (i, j), eps_logit)
        for k in range(2):
            out.d_center[i, k] = central("centers", element_set.centers, (i, k), eps_center)
        out.d_orientation[i] = central("orientations", element_set.orientations, (i,), eps_theta)
        out.d_depth[i] = central("depths", element_set.depths, (i,), eps_depth)
        for k in range(3):
            out.d_color[i, k] = central("colors", element_set.colors, (i, k), eps_color)

    for k in range(3):
        out.d_background_color[k] = central(
            "background_color", element_set.background_color, (k,), eps_color)
    z0 = element_set.background_depth
    out.d_background_depth = (
        loss_fn(element_set.with_arrays(background_depth=z0 + eps_depth))
        - loss_fn(element_set.with_arrays(background_depth=z0 - eps_depth))
    ) / (2.0 * eps_depth)
    return out
