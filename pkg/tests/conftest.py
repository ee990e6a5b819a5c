import math

import numpy as np
import pytest

from diffcomp.core import ElementSet, PatchLibrary, RgbmImage

BG = (0.96, 0.96, 0.93)


def bleed_rgb(rgb, mask, iters=3):
    """Extend colors past the mask edge, as real artwork cutouts do.

    Keeps partial-coverage pixels from blending toward black in the soft
    compositor.
    """
    out = rgb.copy()
    known = mask.astype(bool).copy()
    h, w = mask.shape
    for _ in range(iters):
        grow = known.copy()
        acc = np.zeros_like(out)
        cnt = np.zeros((h, w))
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            kshift = np.zeros((h, w), bool)
            vshift = np.zeros_like(out)
            ys = slice(max(0, dy), h + min(0, dy))
            xs = slice(max(0, dx), w + min(0, dx))
            ys_src = slice(max(0, -dy), h + min(0, -dy))
            xs_src = slice(max(0, -dx), w + min(0, -dx))
            kshift[ys, xs] = known[ys_src, xs_src]
            vshift[ys, xs] = out[ys_src, xs_src]
            acc += vshift * kshift[..., None]
            cnt += kshift
            grow |= kshift
        fill = ~known & (cnt > 0)
        out[fill] = acc[fill] / cnt[fill][..., None]
        known = grow
    return out


def disk_patch(sz, color):
    d = np.zeros((sz, sz, 4))
    yy, xx = np.mgrid[0:sz, 0:sz]
    c = (sz - 1) / 2
    m = ((xx - c) ** 2 + (yy - c) ** 2) <= (sz / 2.0 - 0.6) ** 2
    rgb = np.asarray(color)[None, None, :] * m[..., None]
    d[..., :3] = bleed_rgb(rgb, m)
    d[..., 3] = m
    return RgbmImage(d)


def square_patch(sz, color):
    d = np.zeros((sz, sz, 4))
    yy, xx = np.mgrid[0:sz, 0:sz]
    c = (sz - 1) / 2
    m = (np.abs(xx - c) <= sz / 2 - 1.1) & (np.abs(yy - c) <= sz / 2 - 1.1)
    rgb = np.asarray(color)[None, None, :] * m[..., None]
    d[..., :3] = bleed_rgb(rgb, m)
    d[..., 3] = m
    return RgbmImage(d)


def swirl_patch(sz=32, tex_amp=0.8):
    """Asymmetric element for rotation tests: smooth multi-lobe texture,
    rim fading to the background color."""
    d = np.zeros((sz, sz, 4))
    yy, xx = np.mgrid[0:sz, 0:sz]
    c = (sz - 1) / 2
    r2 = (xx - c) ** 2 + (yy - c) ** 2
    m = r2 <= (sz / 2.0 - 0.6) ** 2
    rad = np.sqrt(r2) / (sz / 2 - 0.6)
    fade = np.clip((1.0 - rad) / 0.35, 0, 1)
    bg = np.asarray(BG)
    g1 = np.exp(-(((xx - c - sz * 0.16) ** 2 + (yy - c - sz * 0.10) ** 2) / (sz * 0.24) ** 2))
    g2 = np.exp(-(((xx - c + sz * 0.20) ** 2 + (yy - c + sz * 0.02) ** 2) / (sz * 0.30) ** 2))
    g3 = np.exp(-(((xx - c) ** 2 + (yy - c + sz * 0.22) ** 2) / (sz * 0.18) ** 2))
    tex = np.stack([0.15 + 0.8 * g1 + 0.05 * g3, 0.25 + 0.62 * g2,
                    0.8 - 0.55 * g1 - 0.2 * g3], axis=-1)
    col = bg[None, None, :] + tex_amp * fade[..., None] * (np.clip(tex, 0, 1) - bg[None, None, :])
    rgb = np.clip(col, 0, 1) * m[..., None]
    d[..., :3] = bleed_rgb(rgb, m)
    d[..., 3] = m
    return RgbmImage(d)


@pytest.fixture(scope="session")
def two_type_library():
    return PatchLibrary(patches=(disk_patch(16, (0.85, 0.25, 0.2)),
                                 square_patch(16, (0.2, 0.45, 0.85))),
                        background_color=BG)


@pytest.fixture(scope="session")
def rotation_library():
    return PatchLibrary(patches=(swirl_patch(32),), background_color=BG,
                        sample_spacing=(0.9, 0.9))


@pytest.fixture(scope="session")
def single_disk_library():
    return PatchLibrary(patches=(disk_patch(12, (0.3, 0.55, 0.8)),),
                        background_color=BG)


def small_scene(library, n=3, canvas=(32, 28), seed=0):
    rng = np.random.default_rng(seed)
    m = library.num_types
    margin = library.max_footprint_radius() * 0.5 + 2
    centers = np.column_stack([rng.uniform(margin, canvas[0] - margin, n),
                               rng.uniform(margin, canvas[1] - margin, n)])
    return ElementSet(
        type_logits=rng.uniform(-1, 1, (n, m)),
        centers=centers,
        orientations=rng.uniform(0, 2 * math.pi, n),
        depths=rng.uniform(2.5, 6.5, n),
        colors=rng.uniform(0.2, 0.9, (n, 3)),
        alive=np.ones(n, dtype=bool),
        background_color=np.asarray(BG),
        background_depth=3.3,
    )
