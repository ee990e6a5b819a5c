import math

import numpy as np
import pytest

from diffcomp.compositor import composite_hard, composite_set
from diffcomp.core import DiscreteElement, ElementSet
from diffcomp.grad import ParamGradients
from diffcomp.optimizer import (AdamState, OptimizationConfig, TaskInputs,
                                adam_step, desk_preset, discretize, grid_centers,
                                init_elements, paper_preset, prune_elements,
                                reseed_elements, run_task)

from conftest import BG, small_scene


def _grads_like(es, **overrides):
    g = ParamGradients.zeros(es.count, es.num_types)
    for k, v in overrides.items():
        setattr(g, k, v)
    return g


# ---------------------------------------------------------------------------
# init

def test_grid_init_four_elements():
    pts = grid_centers(4, (100, 100))
    assert np.allclose(sorted(map(tuple, pts)), [(25, 25), (25, 75), (75, 25), (75, 75)])


def test_init_constants(two_type_library):
    cfg = desk_preset(canvas=(64, 64), n_max=9)
    es = init_elements(cfg, two_type_library)
    assert np.all(es.depths == 9.0)
    assert es.background_depth == 3.3
    assert np.all(es.type_logits == 1.0)
    assert np.all(es.orientations == 0.0)
    # color parameters start where the response is exactly one
    from diffcomp.compositor import color_response
    assert np.allclose(color_response(es.colors), 1.0)


def test_init_background_from_target(two_type_library):
    cfg = desk_preset(canvas=(32, 32), n_max=4)
    truth = [DiscreteElement(1, (10.5, 10.5), 0.0, 9.0, (10., 10., 10.))]
    target = composite_hard(truth, two_type_library, (32, 32), background_color=BG)
    es = init_elements(cfg, two_type_library, target=target)
    assert np.allclose(es.background_color, BG)   # median of a mostly-background image


def test_equal_logits_render_uniform_mixture(two_type_library):
    cfg = desk_preset(canvas=(48, 48), n_max=1)
    es = init_elements(cfg, two_type_library)
    from diffcomp.compositor import softmax
    probs = softmax(es.type_logits, axis=1)
    assert np.allclose(probs, 0.5)


# ---------------------------------------------------------------------------
# adam

def test_first_step_magnitude_orientation(two_type_library):
    cfg = desk_preset(canvas=(64, 64), n_max=4)
    es = init_elements(cfg, two_type_library)
    state = AdamState.zeros(es.count, es.num_types)
    g = _grads_like(es, d_orientation=np.array([0.3, -2.0, 0.001, 5.0]))
    new, state = adam_step(state, es, g, cfg)
    delta = np.abs(new.orientations - es.orientations)
    expected = cfg.base_lr * cfg.lr_orientation
    assert np.allclose(delta, expected, rtol=1e-6)


def test_zero_gradients_leave_parameters(two_type_library):
    cfg = desk_preset(canvas=(64, 64), n_max=4)
    es = init_elements(cfg, two_type_library)
    state = AdamState.zeros(es.count, es.num_types)
    new, _ = adam_step(state, es, ParamGradients.zeros(es.count, es.num_types), cfg)
    assert np.array_equal(new.centers, es.centers)
    assert np.array_equal(new.type_logits, es.type_logits)
    assert np.array_equal(new.depths, es.depths)


def test_adam_deterministic(two_type_library):
    cfg = desk_preset(canvas=(64, 64), n_max=4)
    rng = np.random.default_rng(0)

    def run():
        es = init_elements(cfg, two_type_library)
        state = AdamState.zeros(es.count, es.num_types)
        r = np.random.default_rng(42)
        for _ in range(5):
            g = _grads_like(es, d_center=r.normal(size=(4, 2)),
                            d_depth=r.normal(size=4))
            es, state = adam_step(state, es, g, cfg)
        return es

    a, b = run(), run()
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.depths, b.depths)


def test_non_finite_gradient_fails_fast(two_type_library):
    cfg = desk_preset(canvas=(64, 64), n_max=2)
    es = init_elements(cfg, two_type_library)
    state = AdamState.zeros(es.count, es.num_types)
    g = _grads_like(es, d_depth=np.array([1.0, np.inf]))
    with pytest.raises(ValueError, match="d_depth"):
        adam_step(state, es, g, cfg)


def test_canvas_normalized_center_rate():
    cfg = desk_preset(canvas=(200, 100))
    rates = cfg.effective_rates()
    assert abs(rates["center_x"] - cfg.base_lr * cfg.lr_center * 200) < 1e-15
    assert abs(rates["center_y"] - cfg.base_lr * cfg.lr_center * 100) < 1e-15
    paper = paper_preset(canvas=(200, 100))
    assert abs(paper.effective_rates()["center_x"] - 1e-6 * 0.01) < 1e-21


# ---------------------------------------------------------------------------
# prune / reseed / discretize

def _set_from(rows, bg_depth=3.3):
    n = len(rows)
    return ElementSet(
        type_logits=np.array([r["logits"] for r in rows], dtype=float),
        centers=np.array([r["center"] for r in rows], dtype=float),
        orientations=np.array([r.get("theta", 0.0) for r in rows]),
        depths=np.array([r["depth"] for r in rows], dtype=float),
        colors=np.full((n, 3), 10.0),
        alive=np.ones(n, dtype=bool),
        background_color=np.array(BG),
        background_depth=bg_depth,
    )


def test_prune_removes_hidden(two_type_library):
    es = _set_from([
        {"logits": [2.0, 0.0], "center": [10, 10], "depth": 3.0},
        {"logits": [2.0, 0.0], "center": [40, 40], "depth": 9.0},
    ])
    pruned, report, _ = prune_elements(es, two_type_library)
    assert report.removed_hidden == [0]
    assert pruned.count == 1
    assert report.index_map == {1: 0}


def test_prune_removes_close_duplicate_lower_depth(two_type_library):
    es = _set_from([
        {"logits": [2.0, 0.0], "center": [20.0, 20.0], "depth": 8.0},
        {"logits": [2.0, 0.0], "center": [21.0, 20.0], "depth": 9.0},
    ])
    pruned, report, _ = prune_elements(es, two_type_library)
    assert report.removed_duplicates == [(1, 0)]
    assert pruned.count == 1
    assert pruned.depths[0] == 9.0


def test_prune_keeps_different_types_at_same_center(two_type_library):
    es = _set_from([
        {"logits": [2.0, 0.0], "center": [20.0, 20.0], "depth": 8.0},
        {"logits": [0.0, 2.0], "center": [20.0, 20.0], "depth": 9.0},
    ])
    pruned, report, _ = prune_elements(es, two_type_library)
    assert pruned.count == 2
    assert report.removed_duplicates == []


def test_prune_respects_protection(two_type_library):
    es = _set_from([
        {"logits": [2.0, 0.0], "center": [20.0, 20.0], "depth": 8.0},
        {"logits": [2.0, 0.0], "center": [21.0, 20.0], "depth": 9.0},
    ])
    protected = np.array([True, False])
    pruned, report, _ = prune_elements(es, two_type_library, protected=protected)
    # the deeper unprotected twin is removed instead of the frozen one
    assert pruned.count == 1
    assert pruned.depths[0] == 8.0


def test_reseed_with_orientation(two_type_library):
    cfg = desk_preset(canvas=(64, 64), n_max=4, optimize_orientation=True)
    es = init_elements(cfg, two_type_library)
    bigger, _ = reseed_elements(es, cfg, two_type_library)
    assert bigger.count == 4 + 3 * 4 + 4
    offsets = bigger.orientations[4:16]
    expected = np.concatenate([np.full(4, 0.5 * math.pi), np.full(4, math.pi),
                               np.full(4, 1.5 * math.pi)])
    assert np.array_equal(offsets, expected)


def test_reseed_without_orientation(two_type_library):
    cfg = desk_preset(canvas=(64, 64), n_max=4, optimize_orientation=False)
    es = init_elements(cfg, two_type_library)
    bigger, _ = reseed_elements(es, cfg, two_type_library)
    assert bigger.count == 4 + 4


def test_reseed_zeroes_new_adam_moments(two_type_library):
    cfg = desk_preset(canvas=(64, 64), n_max=2, optimize_orientation=False)
    es = init_elements(cfg, two_type_library)
    state = AdamState.zeros(es.count, es.num_types)
    state.m_centers += 5.0
    bigger, state2 = reseed_elements(es, cfg, two_type_library, state)
    assert np.all(state2.m_centers[:2] == 5.0)
    assert np.all(state2.m_centers[2:] == 0.0)


def test_discretize_argmax_and_hidden(two_type_library):
    es = _set_from([
        {"logits": [0.1, 2.0], "center": [10, 10], "depth": 9.0},
        {"logits": [0.5, 0.5], "center": [20, 20], "depth": 9.0},
        {"logits": [2.0, 0.1], "center": [30, 30], "depth": 2.0},
    ])
    out = discretize(es, two_type_library)
    assert len(out) == 2
    assert out[0].type_index == 2
    assert out[1].type_index == 1   # tie breaks to the lowest index


# ---------------------------------------------------------------------------
# run_task plumbing

def test_run_task_requires_target(two_type_library):
    cfg = desk_preset(canvas=(32, 32), n_max=4, schedule_scale=0.001)
    with pytest.raises(ValueError, match="target"):
        run_task("decompose", TaskInputs(library=two_type_library), cfg)


def test_run_task_rejects_small_canvas(two_type_library):
    cfg = desk_preset(canvas=(8, 8), n_max=4, schedule_scale=0.001)
    from diffcomp.core import RgbmImage
    target = RgbmImage(np.zeros((8, 8, 4)))
    with pytest.raises(ValueError, match="smaller than"):
        run_task("decompose", TaskInputs(library=two_type_library, target=target), cfg)


def test_run_task_unknown_task(two_type_library):
    cfg = desk_preset(canvas=(32, 32))
    with pytest.raises(ValueError, match="unknown task"):
        run_task("sharpen", TaskInputs(library=two_type_library), cfg)


def test_schedule_scaling():
    cfg = desk_preset(canvas=(64, 64), schedule_scale=0.1, total_iters=32000)
    assert cfg.scaled_total_iters() == 3200
    assert cfg.removal_iterations() == [400, 1200, 2000, 2800]
    assert cfg.reseed_iterations() == [800, 1600, 2400]


def test_frozen_elements_do_not_move(two_type_library):
    """Tiling-style run: frozen rows keep their exact parameters."""
    truth = [DiscreteElement(1, (12.5, 12.5), 0.0, 6.0, (10., 10., 10.)),
             DiscreteElement(2, (27.5, 24.5), 0.0, 7.0, (10., 10., 10.))]
    target = composite_hard(truth, two_type_library, (40, 40), background_color=BG)
    from diffcomp.compositor import discrete_to_soft
    init = discrete_to_soft(truth, BG, 3.3, 2)
    # shift the unfrozen element off target so the optimizer has work
    centers = np.array(init.centers)
    centers[1] += 2.0
    init = init.with_arrays(centers=centers)
    cfg = desk_preset(canvas=(40, 40), n_max=2, schedule_scale=0.004,
                      optimize_orientation=False)
    frozen = np.array([True, False])
    res = run_task("decompose",
                   TaskInputs(library=two_type_library, target=target,
                              init_set=init, frozen=frozen), cfg)
    live_frozen = res.element_set
    assert np.array_equal(live_frozen.centers[0], init.centers[0])
    assert live_frozen.depths[0] == init.depths[0]
    assert not np.array_equal(live_frozen.centers[1], init.centers[1])


def test_short_decompose_improves_loss(two_type_library):
    truth = [DiscreteElement(1, (12.5, 12.5), 0.0, 6.0, (10., 10., 10.)),
             DiscreteElement(2, (28.5, 25.5), 0.0, 7.0, (10., 10., 10.))]
    target = composite_hard(truth, two_type_library, (48, 48), background_color=BG)
    cfg = desk_preset(canvas=(48, 48), n_max=9, schedule_scale=0.01,
                      optimize_orientation=False)
    res = run_task("decompose", TaskInputs(library=two_type_library, target=target), cfg)
    losses = [t["loss"] for t in res.trace]
    assert losses[-1] < 0.5 * losses[0]
    assert len(res.trace) == cfg.scaled_total_iters()
    assert set(res.trace[0]) >= {"iteration", "loss", "live_elements"}
