import math

import numpy as np
import pytest

from diffcomp.compositor import build_pyramid, composite_set
from diffcomp.core import ElementSet
from diffcomp.grad import (ParamGradients, backward, finite_diff_gradients,
                           forward_with_tape, pyramid_backward)
from diffcomp.losses import l2_loss

from conftest import BG, small_scene


def _target_pyramid(library, canvas, seed=11, levels=4):
    target_set = small_scene(library, n=3, canvas=canvas, seed=seed)
    img = composite_set(target_set, library, canvas)
    return build_pyramid(img, levels, spacing=float(max(library.sample_spacing)))


def _l2_loss_fn(library, canvas, target_pyr, levels=4):
    def fn(es):
        pyr, _ = forward_with_tape(es, library, canvas, levels)
        return l2_loss(target_pyr, pyr).value
    return fn


def test_forward_reproducible(two_type_library):
    es = small_scene(two_type_library, seed=3)
    a, _ = forward_with_tape(es, two_type_library, (32, 28), 4)
    b, _ = forward_with_tape(es, two_type_library, (32, 28), 4)
    for la, lb in zip(a.levels, b.levels):
        assert np.array_equal(la.data, lb.data)


def test_tape_pyramid_matches_compositor(two_type_library):
    es = small_scene(two_type_library, seed=4)
    pyr, _ = forward_with_tape(es, two_type_library, (32, 28), 4)
    direct = build_pyramid(composite_set(es, two_type_library, (32, 28)), 4,
                           spacing=1.0)
    for la, lb in zip(pyr.levels, direct.levels):
        assert np.array_equal(la.data, lb.data)


def test_zero_adjoints_give_zero_gradients(two_type_library):
    es = small_scene(two_type_library, seed=5)
    pyr, tape = forward_with_tape(es, two_type_library, (32, 28), 4)
    adjs = [np.zeros((l.height, l.width, 3)) for l in pyr.levels]
    g = backward(tape, adjs)
    assert np.all(g.d_type_logits == 0)
    assert np.all(g.d_center == 0)
    assert np.all(g.d_orientation == 0)
    assert np.all(g.d_depth == 0)
    assert np.all(g.d_color == 0)
    assert np.all(g.d_background_color == 0)
    assert g.d_background_depth == 0.0


def test_translation_invariant_sum_gives_zero_center_gradient():
    """Loss = sum of all level-1 pixels: moving a fully interior constant
    full-mask element cannot change it (partition of unity).

    The saturated-depth regime makes the composite equal the layer up to
    exp(-gap) corrections, so the plane sum inherits the invariance."""
    from diffcomp.core import PatchLibrary, RgbmImage
    const = np.zeros((6, 6, 4))
    const[:, :, :3] = 0.5
    const[:, :, 3] = 1.0
    lib = PatchLibrary(patches=(RgbmImage(const),))
    es = ElementSet(
        type_logits=np.zeros((1, 1)), centers=np.array([[13.3, 12.2]]),
        orientations=np.zeros(1), depths=np.array([49.0]),
        colors=np.full((1, 3), 10.0), alive=np.ones(1, bool),
        background_color=np.array(BG), background_depth=9.0)
    pyr, tape = forward_with_tape(es, lib, (26, 26), 1)
    adjs = [np.ones((26, 26, 3))]
    g = backward(tape, adjs)
    assert np.allclose(g.d_center, 0.0, atol=1e-9)


def test_backward_matches_finite_differences(two_type_library):
    canvas = (32, 28)
    target_pyr = _target_pyramid(two_type_library, canvas)
    es = small_scene(two_type_library, seed=6)
    pyr, tape = forward_with_tape(es, two_type_library, canvas, 4)
    lv = l2_loss(target_pyr, pyr)
    g = backward(tape, lv.level_adjoints)
    fd = finite_diff_gradients(_l2_loss_fn(two_type_library, canvas, target_pyr), es,
                               eps_center=1e-5, eps_theta=1e-5)
    for name in ("d_type_logits", "d_center", "d_orientation", "d_depth",
                 "d_color", "d_background_color"):
        a = np.atleast_1d(getattr(g, name))
        b = np.atleast_1d(getattr(fd, name))
        rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        assert rel.max() < 1e-3, f"{name}: {rel.max()}"
    assert abs(g.d_background_depth - fd.d_background_depth) < 1e-6


def test_mirror_symmetry_of_center_gradient(two_type_library):
    """Mirroring the scene and target left-right flips d_center_x and
    preserves d_center_y. Canvas sizes of 2^k + 1 keep pyramid
    decimation mirror-equivariant at every level."""
    canvas = (33, 33)
    w = canvas[0]
    target_set = small_scene(two_type_library, n=2, canvas=canvas, seed=12)
    es = small_scene(two_type_library, n=2, canvas=canvas, seed=13)

    def mirror(s):
        c = np.array(s.centers)
        c[:, 0] = (w - 1) - c[:, 0]
        return s.with_arrays(centers=c, orientations=-np.array(s.orientations))

    def grads(scene_set, tgt_set):
        tp = build_pyramid(composite_set(tgt_set, two_type_library, canvas), 4, 1.0)
        pyr, tape = forward_with_tape(scene_set, two_type_library, canvas, 4)
        return backward(tape, l2_loss(tp, pyr).level_adjoints)

    g = grads(es, target_set)
    gm = grads(mirror(es), mirror(target_set))
    assert np.allclose(g.d_center[:, 0], -gm.d_center[:, 0], rtol=1e-9, atol=1e-12)
    assert np.allclose(g.d_center[:, 1], gm.d_center[:, 1], rtol=1e-9, atol=1e-12)


def test_depth_gradients_sum_to_zero(two_type_library):
    canvas = (32, 28)
    target_pyr = _target_pyramid(two_type_library, canvas)
    es = small_scene(two_type_library, seed=7)
    pyr, tape = forward_with_tape(es, two_type_library, canvas, 4)
    g = backward(tape, l2_loss(target_pyr, pyr).level_adjoints)
    total = g.d_depth.sum() + g.d_background_depth
    assert abs(total) < 1e-12


def test_depth_shift_leaves_gradients_unchanged(two_type_library):
    canvas = (32, 28)
    target_pyr = _target_pyramid(two_type_library, canvas)
    es = small_scene(two_type_library, seed=8)
    es = es.with_arrays(depths=np.round(es.depths * 1024) / 1024,
                        background_depth=3.296875)
    shifted = es.with_arrays(depths=es.depths + 2.0,
                             background_depth=es.background_depth + 2.0)
    outs = []
    for s in (es, shifted):
        pyr, tape = forward_with_tape(s, two_type_library, canvas, 4)
        outs.append(backward(tape, l2_loss(target_pyr, pyr).level_adjoints))
    assert np.array_equal(outs[0].d_depth, outs[1].d_depth)
    assert np.array_equal(outs[0].d_center, outs[1].d_center)
    assert outs[0].d_background_depth == outs[1].d_background_depth


def test_fd_exact_for_quadratic():
    es = ElementSet(
        type_logits=np.ones((1, 1)), centers=np.array([[5.0, 5.0]]),
        orientations=np.zeros(1), depths=np.array([4.0]),
        colors=np.full((1, 3), 0.5), alive=np.ones(1, bool),
        background_color=np.array(BG), background_depth=3.3)

    def quad(s):
        return float(3.0 * s.depths[0] ** 2 + 2.0 * s.centers[0, 0])

    fd = finite_diff_gradients(quad, es)
    assert abs(fd.d_depth[0] - 24.0) < 1e-6     # d/dz 3z^2 at z=4
    assert abs(fd.d_center[0, 0] - 2.0) < 1e-8


def test_fd_zero_for_constant(two_type_library):
    es = small_scene(two_type_library, seed=9)
    fd = finite_diff_gradients(lambda s: 7.25, es)
    assert np.all(fd.d_type_logits == 0)
    assert np.all(fd.d_center == 0)
    assert fd.d_background_depth == 0


def test_adjoint_shape_mismatch_raises(two_type_library):
    es = small_scene(two_type_library, seed=10)
    pyr, tape = forward_with_tape(es, two_type_library, (32, 28), 4)
    bad = [np.zeros((5, 5, 3))] * 4
    with pytest.raises(ValueError, match="adjoint"):
        backward(tape, bad)


def test_pyramid_backward_is_adjoint_of_forward():
    """<A, P(x)> == <P^T(A), x> for random x and A (exact adjoint pair)."""
    rng = np.random.default_rng(14)
    canvas = (20, 14)
    levels = 3
    from diffcomp.core import RgbmImage
    x = rng.normal(size=(14, 20, 4))
    x[:, :, 3] = 0.0
    pyr = build_pyramid(RgbmImage(np.ascontiguousarray(x)), levels, spacing=1.0)
    adjs = []
    lhs = 0.0
    for level in pyr.levels:
        a = rng.normal(size=(level.height, level.width, 3))
        adjs.append(a)
        lhs += float((a * level.rgb).sum())
    g = pyramid_backward(adjs, canvas, levels, 1.0)
    rhs = float((g * x[:, :, :3]).sum())
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))
