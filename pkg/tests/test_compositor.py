import math

import numpy as np
import pytest

from diffcomp.core import DiscreteElement, Element, ElementSet, PatchLibrary, RgbmImage
from diffcomp.compositor import (Layer, build_pyramid, composite_hard,
                                 composite_set, composite_soft, discrete_to_soft,
                                 gaussian_taps, render_scene, sample_patch,
                                 transform_element)

from conftest import BG, disk_patch, small_scene


def checker_patch(sz=4):
    data = np.zeros((sz, sz, 4))
    yy, xx = np.mgrid[0:sz, 0:sz]
    data[:, :, 0] = (xx + yy) % 2
    data[:, :, 1] = xx / max(sz - 1, 1)
    data[:, :, 2] = 0.25
    data[:, :, 3] = 1.0
    return RgbmImage(data)


# ---------------------------------------------------------------------------
# sample_patch

def test_sample_at_pixel_center_is_identity():
    p = checker_patch(4)
    # pixel (2,1): local = (2 - 1.5, 1 - 1.5)
    val = sample_patch(p, (0.5, -0.5))
    assert np.allclose(val, p.data[1, 2], atol=0, rtol=0)


def test_sample_midpoint_is_average():
    p = checker_patch(4)
    val = sample_patch(p, (0.0, -1.5))   # halfway between pixels (1,0) and (2,0)
    expected = 0.5 * (p.data[0, 1] + p.data[0, 2])
    assert np.allclose(val, expected)


def test_sample_outside_support_is_zero():
    p = checker_patch(4)
    assert np.all(sample_patch(p, (-10.0, 0.0)) == 0.0)
    assert np.all(sample_patch(p, (0.0, 55.0)) == 0.0)


def test_partition_of_unity_inside_full_mask():
    # at any interior point the mask channel interpolates to exactly 1
    p = checker_patch(6)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1.2, 1.2, size=(64, 2))
    vals = sample_patch(p, pts)
    assert np.allclose(vals[:, 3], 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# transform_element

def _element(logits, center, theta=0.0, depth=9.0, color=10.0):
    return Element(type_logits=np.asarray(logits, dtype=float),
                   center=np.asarray(center, dtype=float),
                   orientation=theta, depth=depth,
                   color=np.full(3, float(color)))


def test_identity_placement_pastes_patch():
    p = checker_patch(4)
    lib = PatchLibrary(patches=(p,))
    # center chosen so patch pixel (0,0) lands on canvas pixel (5,6)
    el = _element([0.0], (6.5, 7.5), 0.0, color=10.0)
    layer = transform_element(el, lib, (16, 16))
    img = layer.image.data
    assert np.allclose(img[6:10, 5:9], p.data, atol=1e-12)
    img_rest = img.copy()
    img_rest[6:10, 5:9] = 0
    assert np.all(img_rest == 0)


def test_equal_logits_average_two_types():
    pa = checker_patch(4)
    pb_data = np.roll(pa.data.copy(), 1, axis=0)
    pb = RgbmImage(pb_data)
    lib = PatchLibrary(patches=(pa, pb))
    el = _element([1.0, 1.0], (6.5, 7.5))
    layer = transform_element(el, lib, (16, 16))
    la = transform_element(_element([20.0, -20.0], (6.5, 7.5)), lib, (16, 16))
    lb = transform_element(_element([-20.0, 20.0], (6.5, 7.5)), lib, (16, 16))
    avg = 0.5 * (la.image.data + lb.image.data)
    assert np.allclose(layer.image.data, avg, atol=1e-8)


def test_rotation_by_quarter_turn_matches_exact_scatter():
    """Independent oracle: place each patch pixel at c + R(pi/2) local."""
    p = checker_patch(5)   # odd size keeps rotated samples grid-aligned
    lib = PatchLibrary(patches=(p,))
    c = (8.0, 7.0)
    el = _element([0.0], c, math.pi / 2.0)
    layer = transform_element(el, lib, (16, 16))
    expected = np.zeros((16, 16, 4))
    ct, st = math.cos(math.pi / 2), math.sin(math.pi / 2)
    for py in range(5):
        for px in range(5):
            lx, ly = px - 2.0, py - 2.0
            gx = c[0] + ct * lx - st * ly
            gy = c[1] + st * lx + ct * ly
            expected[int(round(gy)), int(round(gx))] = p.data[py, px]
    assert np.allclose(layer.image.data, expected, atol=1e-9)


def test_color_modulation_skips_mask():
    p = checker_patch(4)
    lib = PatchLibrary(patches=(p,))
    el = _element([0.0], (6.5, 7.5), color=0.5)   # response 0.5
    layer = transform_element(el, lib, (16, 16))
    assert np.allclose(layer.image.data[6:10, 5:9, :3], 0.5 * p.data[:, :, :3])
    assert np.allclose(layer.image.data[6:10, 5:9, 3], p.data[:, :, 3])


# ---------------------------------------------------------------------------
# composite_soft

def test_no_elements_gives_background():
    img = composite_soft([], (0.2, 0.4, 0.6), 3.3, [], canvas=(8, 6))
    assert np.allclose(img.rgb, np.array([0.2, 0.4, 0.6]))
    assert np.allclose(img.mask, 1.0)


def test_saturated_depth_shows_element():
    full = RgbmImage(np.concatenate([np.full((6, 8, 3), 0.7), np.ones((6, 8, 1))], axis=2))
    img = composite_soft([Layer(full)], (0.0, 0.0, 0.0), 0.0, [40.0])
    assert np.allclose(img.rgb, 0.7, rtol=1e-15, atol=1e-15)


def test_equal_depth_layers_average():
    a = RgbmImage(np.concatenate([np.full((4, 4, 3), 1.0), np.ones((4, 4, 1))], axis=2))
    b = RgbmImage(np.concatenate([np.full((4, 4, 3), 0.0), np.ones((4, 4, 1))], axis=2))
    img = composite_soft([Layer(a), Layer(b)], (0.9, 0.9, 0.9), 0.0, [50.0, 50.0])
    assert np.allclose(img.rgb, 0.5, atol=1e-12)


def test_visibility_weights_sum_to_one(two_type_library):
    es = small_scene(two_type_library, n=4, seed=5)
    scene = render_scene(es, two_type_library, (32, 28))
    # reconstruct sum of weights: mask channel uses same denominator, so
    # verify via an all-ones probe: weights sum = den/den = 1 by algebra;
    # check composite equals convex combination bounds instead
    assert np.all(scene.image[:, :, :3] <= 1.0 + 1e-9)
    assert np.all(scene.image[:, :, :3] >= 0.0 - 1e-9)


def test_depth_shift_invariance_exact(two_type_library):
    es = small_scene(two_type_library, n=3, seed=6)
    # dyadic depths keep every depth+shift exact in binary, so the
    # softmax shift invariance holds bit for bit
    es = es.with_arrays(depths=np.round(es.depths * 1024) / 1024,
                        background_depth=3.296875)
    a = composite_set(es, two_type_library, (32, 28))
    for shift in (0.5, 2.0, -4.0):
        shifted = es.with_arrays(depths=es.depths + shift,
                                 background_depth=es.background_depth + shift)
        b = composite_set(shifted, two_type_library, (32, 28))
        assert np.array_equal(a.data, b.data)


def test_render_scene_matches_layer_compositing(two_type_library):
    es = small_scene(two_type_library, n=4, seed=7)
    canvas = (32, 28)
    fast = composite_set(es, two_type_library, canvas)
    layers = [transform_element(e, two_type_library, canvas) for e in es.elements]
    slow = composite_soft(layers, es.background_color, es.background_depth,
                          es.depths)
    assert np.allclose(fast.data, slow.data, atol=1e-12)


def test_constant_full_mask_translation_preserves_sum():
    # integer sample spacing: sum over the plane is invariant to sub-pixel
    # translation of a constant full-mask element
    const = np.zeros((6, 6, 4))
    const[:, :, :3] = 0.6
    const[:, :, 3] = 1.0
    lib = PatchLibrary(patches=(RgbmImage(const),))
    sums = []
    for off in (0.0, 0.3, 0.55, 0.71):
        el = _element([0.0], (12.0 + off, 11.0), 0.0)
        layer = transform_element(el, lib, (24, 24))
        sums.append(layer.image.data.sum())
    assert np.allclose(sums, sums[0], rtol=1e-12)


# ---------------------------------------------------------------------------
# composite_hard

def test_hard_composite_deterministic(two_type_library):
    els = [DiscreteElement(1, (10.2, 9.7), 0.4, 5.0, (10., 10., 10.)),
           DiscreteElement(2, (14.9, 12.3), 1.2, 6.0, (10., 10., 10.))]
    a = composite_hard(els, two_type_library, (28, 24))
    b = composite_hard(els, two_type_library, (28, 24))
    assert np.array_equal(a.data, b.data)


def test_hard_composite_argmax_rule(two_type_library):
    top = DiscreteElement(1, (12.5, 12.5), 0.0, 7.0, (10., 10., 10.))
    bottom = DiscreteElement(2, (14.5, 12.5), 0.0, 5.0, (10., 10., 10.))
    img = composite_hard([top, bottom], two_type_library, (28, 28))
    img_swapped = composite_hard([bottom, top], two_type_library, (28, 28))
    assert np.array_equal(img.data, img_swapped.data)
    # center of the top element shows the top element's color
    assert np.allclose(img.rgb[12, 12], two_type_library.patches[0].rgb[7, 7])


def test_hard_composite_tie_breaks_to_higher_index(two_type_library):
    a = DiscreteElement(1, (12.5, 12.5), 0.0, 5.0, (10., 10., 10.))
    b = DiscreteElement(2, (12.5, 12.5), 0.0, 5.0, (10., 10., 10.))
    img = composite_hard([a, b], two_type_library, (28, 28))
    assert np.allclose(img.rgb[12, 12], two_type_library.patches[1].rgb[7, 7])


def test_discretize_embed_round_trip(two_type_library):
    """Hard-composite a scene, embed with sharp logits, re-discretize:
    the re-render must be pixel-identical."""
    from diffcomp.optimizer import discretize
    els = [DiscreteElement(1, (10.5, 9.5), 0.0, 5.0, (10., 10., 10.)),
           DiscreteElement(2, (17.5, 14.5), 0.0, 6.0, (10., 10., 10.))]
    target = composite_hard(els, two_type_library, (32, 28))
    es = discrete_to_soft(els, BG, 3.3, two_type_library.num_types)
    again = discretize(es, two_type_library)
    render = composite_hard(again, two_type_library, (32, 28),
                            background_color=two_type_library.background_color)
    assert np.array_equal(render.data, target.data)


def test_soft_converges_to_hard_with_scaled_depth_gaps(two_type_library):
    els = [DiscreteElement(1, (10.5, 9.5), 0.0, 5.0, (10., 10., 10.)),
           DiscreteElement(2, (14.5, 11.5), 0.0, 6.0, (10., 10., 10.))]
    canvas = (32, 28)
    hard = composite_hard(els, two_type_library, canvas,
                          background_color=BG)
    z0 = 3.3
    scaled = [DiscreteElement(e.type_index, e.center, e.orientation,
                              z0 + (e.depth - z0) * 50.0, e.color) for e in els]
    es = discrete_to_soft(scaled, BG, z0, two_type_library.num_types, logit_scale=25.0)
    soft = composite_set(es, two_type_library, canvas)
    # compare only where every soft element mask is binary
    binary = np.ones(hard.data.shape[:2], dtype=bool)
    for e in scaled:
        layer = transform_element(
            Element(np.full(2, -25.0), np.asarray(e.center), e.orientation,
                    e.depth, np.asarray(e.color)), two_type_library, canvas)
        m = layer.image.mask
        binary &= (m == 0.0) | (m == 1.0)
    # the embedded set has near-one-hot types; masks of the mixture are the
    # patch masks then, so reuse per-element hard masks for the check
    diff = np.abs(soft.rgb - hard.rgb)[binary]
    assert diff.max() < 1e-8


# ---------------------------------------------------------------------------
# pyramid

def test_pyramid_constant_stays_constant():
    img = RgbmImage(np.full((32, 32, 4), 0.42))
    pyr = build_pyramid(img, 4)
    for level in pyr.levels:
        assert np.allclose(level.data, 0.42, atol=1e-12)


def test_pyramid_level_sizes():
    img = RgbmImage(np.zeros((128, 128, 4)))
    pyr = build_pyramid(img, 4)
    assert [(l.height, l.width) for l in pyr.levels] == \
        [(128, 128), (64, 64), (32, 32), (16, 16)]


def test_pyramid_rejects_bad_level_count():
    img = RgbmImage(np.zeros((8, 8, 4)))
    with pytest.raises(ValueError):
        build_pyramid(img, 0)


def test_pyramid_impulse_matches_direct_kernel():
    """Level 2 of a centered impulse equals the decimated normalized
    Gaussian, evaluated directly."""
    n = 33
    data = np.zeros((n, n, 4))
    data[16, 16, :] = 1.0
    pyr = build_pyramid(RgbmImage(data), 2, spacing=1.0)
    offs, taps = gaussian_taps(1.0)
    kernel2d = np.outer(taps, taps)
    expected_full = np.zeros((n, n))
    expected_full[16 + offs[0]:16 + offs[-1] + 1, 16 + offs[0]:16 + offs[-1] + 1] = kernel2d
    expected = expected_full[::2, ::2]
    assert np.allclose(pyr.levels[1].data[:, :, 0], expected, atol=1e-12)


def test_pyramid_kernel_truncated_at_three_sigma():
    offs, taps = gaussian_taps(1.0)
    assert offs.min() == -3 and offs.max() == 3
    assert abs(taps.sum() - 1.0) < 1e-15
