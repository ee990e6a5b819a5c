"""Forward image formation.

Two compositing pipelines share the same element parameterization:

* the soft pipeline mixes patch types with a softmax over type logits,
  samples patches with a bilinear kernel, and blends layers with a
  depth-softmax visibility, making every output pixel differentiable in
  every element parameter;
* the hard pipeline rounds sample coordinates to the nearest patch pixel
  and keeps only the topmost covering element, which is the classic
  layered-compositing behavior and is bit-reproducible.

A multi-resolution pyramid (Gaussian blur + 2x decimation per level)
widens the spatial reach of gradients taken on the soft composite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DiscreteElement, Element, ElementSet, PatchLibrary, RgbmImage


# ---------------------------------------------------------------------------
# Small numeric building blocks

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def color_response(o):
    """Leaky hard sigmoid mapping raw color parameters to RGB factors.

    Identity on the interior segment, slope 0.001 outside, and reaches
    exactly 1.0 at o = 10.
    """
    o = np.asarray(o, dtype=np.float64)
    return np.maximum(np.minimum(o, 0.001 * o + 0.99), 0.001 * o)


def color_response_deriv(o):
    o = np.asarray(o, dtype=np.float64)
    inner = (o >= 0.0) & (o <= 0.99 / 0.999)
    return np.where(inner, 1.0, 0.001)


def _bilinear(patch: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample an (h, w, 4) patch at fractional index coordinates.

    Coordinates outside the patch footprint contribute zero, matching a
    finitely supported interpolation kernel.
    """
    h, w = patch.shape[:2]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros(px.shape + (4,))
    flat = patch.reshape(-1, 4)
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        cx = x0 + dx
        cy = y0 + dy
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        idx = np.where(ok, cy * w + cx, 0)
        out += (wgt * ok)[..., None] * flat[idx]
    return out


def _bilinear_with_grad(patch: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Sample values plus their derivatives w.r.t. (px, py)."""
    h, w = patch.shape[:2]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    val = np.zeros(px.shape + (4,))
    dvx = np.zeros(px.shape + (4,))
    dvy = np.zeros(px.shape + (4,))
    flat = patch.reshape(-1, 4)
    corners = (
        (0, 0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)),
        (1, 0, fx * (1 - fy), (1 - fy), -fx),
        (0, 1, (1 - fx) * fy, -fy, (1 - fx)),
        (1, 1, fx * fy, fy, fx),
    )
    for dx, dy, wgt, dwx, dwy in corners:
        cx = x0 + dx
        cy = y0 + dy
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        idx = np.where(ok, cy * w + cx, 0)
        v = flat[idx]
        okf = ok[..., None]
        val += (wgt[..., None] * v) * okf
        dvx += (dwx[..., None] * v) * okf
        dvy += (dwy[..., None] * v) * okf
    return val, dvx, dvy


def _bilinear_corners(patch: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Gather the four interpolation corners once.

    Returns (v00, v10, v01, v11, fx, fy); out-of-patch corners read a
    guard row of zeros, so the assembled value and its derivatives need
    no validity masks. The value is
    (1-fx)(1-fy) v00 + fx (1-fy) v10 + (1-fx) fy v01 + fx fy v11.
    """
    h, w = patch.shape[:2]
    x0f = np.floor(px)
    y0f = np.floor(py)
    fx = px - x0f
    fy = py - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    flat = np.concatenate([patch.reshape(-1, 4), np.zeros((1, 4))], axis=0)
    guard = h * w
    corners = []
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        cx = x0 + dx
        cy = y0 + dy
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        idx = np.where(ok, cy * w + cx, guard)
        corners.append(flat[idx])
    return corners[0], corners[1], corners[2], corners[3], fx, fy


def _corners_value(v00, v10, v01, v11, fx, fy):
    fxc = fx[..., None]
    fyc = fy[..., None]
    top = v00 + fxc * (v10 - v00)
    bot = v01 + fxc * (v11 - v01)
    return top + fyc * (bot - top)


def _corners_grad(v00, v10, v01, v11, fx, fy):
    fxc = fx[..., None]
    fyc = fy[..., None]
    dvx = (v10 - v00) + fyc * ((v11 - v01) - (v10 - v00))
    dvy = (v01 - v00) + fxc * ((v11 - v10) - (v01 - v00))
    return dvx, dvy


def _bilinear_grad(patch: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Spatial derivatives of _bilinear w.r.t. (px, py), values skipped."""
    h, w = patch.shape[:2]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    dvx = np.zeros(px.shape + (4,))
    dvy = np.zeros(px.shape + (4,))
    flat = patch.reshape(-1, 4)
    corners = (
        (0, 0, -(1 - fy), -(1 - fx)),
        (1, 0, (1 - fy), -fx),
        (0, 1, -fy, (1 - fx)),
        (1, 1, fy, fx),
    )
    for dx, dy, dwx, dwy in corners:
        cx = x0 + dx
        cy = y0 + dy
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        idx = np.where(ok, cy * w + cx, 0)
        v = flat[idx]
        okf = ok[..., None]
        dvx += (dwx[..., None] * v) * okf
        dvy += (dwy[..., None] * v) * okf
    return dvx, dvy


def sample_patch(patch: RgbmImage, local, spacing=(1.0, 1.0)) -> np.ndarray:
    """Evaluate the interpolated patch at patch-local coordinates.

    ``local`` is (..., 2) in canvas units relative to the patch center;
    returns (..., 4) RGBM values, zero outside the kernel support.
    """
    local = np.asarray(local, dtype=np.float64)
    scalar = local.ndim == 1
    local = np.atleast_2d(local)
    rx, ry = spacing
    px = local[..., 0] / rx + (patch.width - 1) / 2.0
    py = local[..., 1] / ry + (patch.height - 1) / 2.0
    out = _bilinear(patch.data, px, py)
    return out[0] if scalar else out


# ---------------------------------------------------------------------------
# Layers and full-canvas transforms

@dataclass(frozen=True)
class Layer:
    image: RgbmImage
    element_index: int = -1


def rotation_local_coords(xs, ys, center, orientation):
    """Canvas coordinates -> element-local coordinates (inverse transform)."""
    c, s = math.cos(orientation), math.sin(orientation)
    dx = xs - center[0]
    dy = ys - center[1]
    return c * dx + s * dy, -s * dx + c * dy


def transform_element(element: Element, library: PatchLibrary, canvas) -> Layer:
    """Rasterize one element to a canvas-sized layer.

    Type probabilities mix the interpolated patches over all four RGBM
    channels; the RGB channels are then scaled by the element's color
    response. The mask channel is never color-modulated.
    """
    w, h = int(canvas[0]), int(canvas[1])
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ux, uy = rotation_local_coords(xs, ys, element.center, element.orientation)
    rx, ry = library.sample_spacing
    probs = softmax(np.asarray(element.type_logits, dtype=np.float64))
    mixed = np.zeros((h, w, 4))
    for j, patch in enumerate(library.patches):
        px = ux / rx + (patch.width - 1) / 2.0
        py = uy / ry + (patch.height - 1) / 2.0
        mixed += probs[j] * _bilinear(patch.data, px, py)
    mixed[:, :, :3] *= color_response(element.color)[None, None, :]
    return Layer(image=RgbmImage(mixed), element_index=-1)


def composite_soft(layers, background_color, background_depth, depths,
                   canvas=None) -> RgbmImage:
    """Blend canvas-sized layers with depth-softmax visibility.

    The background acts as layer 0 with full coverage and constant color;
    the softmax over depths is computed with the max-depth shift for
    numerical safety. ``canvas`` is only needed when no layers are given.
    """
    depths = np.asarray(depths, dtype=np.float64)
    if len(layers) != depths.size:
        raise ValueError("one depth per layer required")
    shift = max(float(depths.max()) if depths.size else float(background_depth),
                float(background_depth))
    e0 = math.exp(background_depth - shift)
    if layers:
        h, w = layers[0].image.height, layers[0].image.width
    elif canvas is not None:
        w, h = int(canvas[0]), int(canvas[1])
    else:
        raise ValueError("canvas size required when compositing zero layers")
    den = np.full((h, w), e0)
    num = np.empty((h, w, 4))
    num[:, :, :3] = e0 * np.asarray(background_color, dtype=np.float64)
    num[:, :, 3] = e0
    for layer, z in zip(layers, depths):
        a = math.exp(z - shift) * layer.image.mask
        den += a
        num += a[:, :, None] * layer.image.data
    return RgbmImage(num / den[:, :, None])


# ---------------------------------------------------------------------------
# Hard (traditional) compositing

def _nearest_stamp(patch: np.ndarray, px, py):
    """Nearest-pixel sample; returns (values, covered) with binary coverage."""
    h, w = patch.shape[:2]
    kx = np.floor(px + 0.5).astype(np.int64)
    ky = np.floor(py + 0.5).astype(np.int64)
    ok = (kx >= 0) & (kx < w) & (ky >= 0) & (ky < h)
    idx = np.where(ok, ky * w + kx, 0)
    vals = patch.reshape(-1, 4)[idx]
    covered = ok & (vals[..., 3] >= 0.5)
    return vals, covered


def hard_element_stamp(element: DiscreteElement, library: PatchLibrary, canvas):
    """Full-canvas nearest-neighbor render of one element.

    Returns (rgb, covered): color values scaled by the element's color
    response, and the boolean coverage mask, zero/False off the element.
    """
    w, h = int(canvas[0]), int(canvas[1])
    patch = library.patches[element.type_index - 1]
    rx, ry = library.sample_spacing
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ux, uy = rotation_local_coords(xs, ys, element.center, element.orientation)
    px = ux / rx + (patch.width - 1) / 2.0
    py = uy / ry + (patch.height - 1) / 2.0
    vals, covered = _nearest_stamp(patch.data, px, py)
    rgb = vals[..., :3] * color_response(np.asarray(element.color))[None, None, :]
    rgb = np.where(covered[..., None], rgb, 0.0)
    return rgb, covered


def composite_hard(discrete, library: PatchLibrary, canvas,
                   background_color=None) -> RgbmImage:
    """Traditional compositor: nearest-neighbor sampling, hard visibility.

    The covering element with the highest depth wins; depth ties break
    toward the higher element index. Deterministic and bit-exact.
    """
    w, h = int(canvas[0]), int(canvas[1])
    out = np.empty((h, w, 4))
    if background_color is None and library.background_image is not None:
        bg = library.background_image
        if (bg.width, bg.height) != (w, h):
            raise ValueError("background image size does not match the canvas")
        out[:, :, :3] = bg.rgb
    else:
        color = library.background_color if background_color is None else background_color
        out[:, :, :3] = np.asarray(color, dtype=np.float64)
    out[:, :, 3] = 1.0
    rx, ry = library.sample_spacing
    margin = int(math.ceil(library.max_footprint_radius() + 0.5)) + 1
    order = np.argsort([e.depth for e in discrete], kind="stable")
    for i in order:
        el = discrete[i]
        patch = library.patches[el.type_index - 1]
        cx, cy = float(el.center[0]), float(el.center[1])
        x_lo = max(int(round(cx)) - margin, 0)
        x_hi = min(int(round(cx)) + margin + 1, w)
        y_lo = max(int(round(cy)) - margin, 0)
        y_hi = min(int(round(cy)) + margin + 1, h)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi].astype(np.float64)
        ux, uy = rotation_local_coords(xs, ys, (cx, cy), el.orientation)
        px = ux / rx + (patch.width - 1) / 2.0
        py = uy / ry + (patch.height - 1) / 2.0
        vals, covered = _nearest_stamp(patch.data, px, py)
        rgb = vals[..., :3] * color_response(np.asarray(el.color))[None, None, :]
        region = out[y_lo:y_hi, x_lo:x_hi]
        region[..., :3] = np.where(covered[..., None], rgb, region[..., :3])
    return RgbmImage(out)


# ---------------------------------------------------------------------------
# Multi-resolution pyramid

@dataclass(frozen=True)
class Pyramid:
    levels: tuple          # of RgbmImage, levels[0] is full resolution
    spacing: float = 1.0

    @property
    def depth(self) -> int:
        return len(self.levels)


def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(i)
    period = 2 * n - 2
    j = np.mod(i, period)
    return np.where(j >= n, period - j, j)


def gaussian_taps(sigma: float):
    """Normalized Gaussian taps truncated at 3 sigma."""
    radius = int(math.floor(3.0 * sigma + 1e-9))
    offs = np.arange(-radius, radius + 1)
    if sigma <= 0:
        taps = np.array([1.0])
        offs = np.array([0])
    else:
        taps = np.exp(-0.5 * (offs / sigma) ** 2)
        taps /= taps.sum()
    return offs, taps


_MATRIX_CACHE: dict = {}


def blur_decimate_matrix(n: int, sigma: float) -> np.ndarray:
    """Matrix applying reflect-padded Gaussian blur then 2x decimation.

    Output length is ceil(n / 2). Cached; the transpose is the exact
    adjoint used by the gradient module.
    """
    key = (n, round(sigma, 12))
    mat = _MATRIX_CACHE.get(key)
    if mat is not None:
        return mat
    offs, taps = gaussian_taps(sigma)
    rows = np.arange(n)[:, None]
    cols = _reflect_index(rows + offs[None, :], n)
    blur = np.zeros((n, n))
    np.add.at(blur, (np.broadcast_to(rows, cols.shape), cols),
              np.broadcast_to(taps, cols.shape))
    mat = np.ascontiguousarray(blur[::2])
    _MATRIX_CACHE[key] = mat
    return mat


def _apply_level(channels: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    # channels: (c, h, w) -> (c, h2, w2)
    return np.matmul(np.matmul(dy, channels), dx.T)


def build_pyramid(image: RgbmImage, levels: int, spacing: float = 1.0) -> Pyramid:
    """Blur-and-decimate stack; level k is 1/2^k of the input resolution.

    Each step blurs with sigma equal to the kernel radius in that level's
    own pixel pitch (so the full-resolution standard deviation doubles per
    level) and keeps every second sample, all four channels alike.
    """
    if levels < 1:
        raise ValueError("pyramid needs at least one level")
    out = [image]
    current = image.data.transpose(2, 0, 1)
    for _ in range(levels - 1):
        h, w = current.shape[1:]
        dy = blur_decimate_matrix(h, spacing)
        dx = blur_decimate_matrix(w, spacing)
        current = _apply_level(current, dy, dx)
        out.append(RgbmImage(np.ascontiguousarray(current.transpose(1, 2, 0))))
    return Pyramid(levels=tuple(out), spacing=spacing)


def pyramid_level_shapes(canvas, levels: int):
    w, h = int(canvas[0]), int(canvas[1])
    shapes = [(h, w)]
    for _ in range(levels - 1):
        h = (h + 1) // 2
        w = (w + 1) // 2
        shapes.append((h, w))
    return shapes


# ---------------------------------------------------------------------------
# Windowed scene renderer (the fast path shared with the gradient module)

@dataclass
class SceneRender:
    """Forward render of a whole element set plus blending intermediates.

    ``live`` maps rows of the per-element arrays back to indices in the
    originating ElementSet. The blend denominator, the composite, and the
    per-pixel sum of element coverage are kept for the backward pass;
    per-type samples and window coordinates are kept only when the caller
    asks (the gradient tape does, plain composites do not).
    """

    canvas: tuple
    live: np.ndarray          # (nl,) indices into the element set
    probs: np.ndarray         # (nl, m) type softmax
    nu: np.ndarray            # (nl, 3) color response
    expz: np.ndarray          # (nl,) exp(depth - shift)
    exp0: float               # exp(background depth - shift)
    shift: float
    origin_x: np.ndarray      # (nl,) window origin, int
    origin_y: np.ndarray
    side: int
    den: np.ndarray           # (h, w)
    image: np.ndarray         # (h, w, 4) composite
    cover_sum: np.ndarray     # (h, w) sum of element masks (background excluded)
    samples: tuple | None = None   # per type, (nl, side^2, 4) interpolated values
    corners: tuple | None = None   # per type, corner gathers for spatial grads
    mixed: np.ndarray | None = None
    flat: np.ndarray | None = None
    valid: np.ndarray | None = None
    local_x: np.ndarray | None = None
    local_y: np.ndarray | None = None


def _window_grid(side: int):
    gy, gx = np.mgrid[0:side, 0:side]
    return gx.ravel(), gy.ravel()


def window_margin(library: PatchLibrary, orientations=None) -> int:
    """Half-side of the per-element evaluation window.

    Axis-aligned scenes get the tight axis-aligned footprint; any rotation
    falls back to the circumradius bound.
    """
    rx, ry = library.sample_spacing
    if orientations is not None and (np.abs(np.asarray(orientations)) < 1e-12).all():
        reach = 0.0
        for p in library.patches:
            reach = max(reach, (p.width - 1) / 2.0 * rx, (p.height - 1) / 2.0 * ry)
        reach += max(rx, ry)
    else:
        reach = library.max_footprint_radius()
    return int(math.ceil(reach + 0.5)) + 1


def render_scene(element_set: ElementSet, library: PatchLibrary, canvas,
                 keep_intermediates: bool = False) -> SceneRender:
    """Soft-composite an element set, evaluating each element only on a
    window around its footprint. Produces the same composite as
    transform_element + composite_soft up to float summation order.
    """
    w, h = int(canvas[0]), int(canvas[1])
    live = np.nonzero(element_set.alive)[0]
    nl = live.size
    margin = window_margin(library, element_set.orientations[live])
    side = 2 * margin + 1
    rx, ry = library.sample_spacing

    z0 = element_set.background_depth
    depths = element_set.depths[live]
    shift = max(float(depths.max()) if nl else z0, z0)
    expz = np.exp(depths - shift)
    exp0 = math.exp(z0 - shift)
    probs = softmax(element_set.type_logits[live], axis=1) if nl else np.zeros((0, element_set.num_types))
    nu = color_response(element_set.colors[live])

    den = np.full(h * w, exp0)
    num = np.zeros((h * w, 3))
    num += exp0 * element_set.background_color[None, :]
    maskch = np.full(h * w, exp0)
    cover = np.zeros(h * w)

    centers = element_set.centers[live]
    ox = np.rint(centers[:, 0]).astype(np.int64) - margin
    oy = np.rint(centers[:, 1]).astype(np.int64) - margin

    scene = SceneRender(
        canvas=(w, h), live=live, probs=probs, nu=nu, expz=expz, exp0=exp0,
        shift=shift, origin_x=ox, origin_y=oy, side=side,
        den=None, image=None, cover_sum=None,
    )
    if nl:
        gx, gy = _window_grid(side)
        X = ox[:, None] + gx[None, :]
        Y = oy[:, None] + gy[None, :]
        valid = (X >= 0) & (X < w) & (Y >= 0) & (Y < h)
        flat = np.where(valid, Y * w + X, 0)
        cth = np.cos(element_set.orientations[live])[:, None]
        sth = np.sin(element_set.orientations[live])[:, None]
        dx = X - centers[:, 0:1]
        dy = Y - centers[:, 1:2]
        ux = cth * dx + sth * dy
        uy = -sth * dx + cth * dy
        samples = []
        corner_cache = []
        mixed = np.zeros((nl, side * side, 4))
        for j, patch in enumerate(library.patches):
            px = ux / rx + (patch.width - 1) / 2.0
            py = uy / ry + (patch.height - 1) / 2.0
            corners = _bilinear_corners(patch.data, px, py)
            hj = _corners_value(*corners)
            mixed += probs[:, j, None, None] * hj
            if keep_intermediates:
                samples.append(hj)
                corner_cache.append(corners)
        m_ch = mixed[:, :, 3] * valid
        a = expz[:, None] * m_ch
        idx = flat.ravel()
        den += np.bincount(idx, weights=a.ravel(), minlength=h * w)
        for c in range(3):
            jc = mixed[:, :, c] * nu[:, c, None]
            num[:, c] += np.bincount(idx, weights=(a * jc).ravel(), minlength=h * w)
        maskch += np.bincount(idx, weights=(a * m_ch).ravel(), minlength=h * w)
        cover += np.bincount(idx, weights=m_ch.ravel(), minlength=h * w)
        if keep_intermediates:
            scene.samples = tuple(samples)
            scene.corners = tuple(corner_cache)
            scene.mixed = mixed
            scene.flat = flat
            scene.valid = valid
            scene.local_x = ux
            scene.local_y = uy

    image = np.empty((h * w, 4))
    image[:, :3] = num / den[:, None]
    image[:, 3] = maskch / den
    scene.den = den.reshape(h, w)
    scene.image = image.reshape(h, w, 4)
    scene.cover_sum = cover.reshape(h, w)
    return scene


def composite_set(element_set: ElementSet, library: PatchLibrary, canvas) -> RgbmImage:
    """Soft composite of a whole element set (window-accelerated)."""
    return RgbmImage(render_scene(element_set, library, canvas).image)


def discrete_to_soft(elements, background_color, background_depth, num_types: int,
                     logit_scale: float = 25.0) -> ElementSet:
    """Embed discrete elements in the soft parameterization.

    Type logits are +/- logit_scale one-hot, so the type softmax and the
    visibility of the resulting set reproduce the hard render up to
    exp(-2 * logit_scale) leakage.
    """
    n = len(elements)
    logits = np.full((n, num_types), -logit_scale)
    centers = np.zeros((n, 2))
    thetas = np.zeros(n)
    depths = np.zeros(n)
    colors = np.zeros((n, 3))
    for i, e in enumerate(elements):
        logits[i, e.type_index - 1] = logit_scale
        centers[i] = e.center
        thetas[i] = e.orientation
        depths[i] = e.depth
        colors[i] = e.color
    return ElementSet(type_logits=logits, centers=centers, orientations=thetas,
                      depths=depths, colors=colors, alive=np.ones(n, dtype=bool),
                      background_color=np.asarray(background_color, dtype=np.float64),
                      background_depth=background_depth)
