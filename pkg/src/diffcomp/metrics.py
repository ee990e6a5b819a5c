"""Recovery metrics for comparing element sets against ground truth."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from .compositor import hard_element_stamp
from .core import PatchLibrary


def angle_difference(a: float, b: float, period: float = 2.0 * math.pi) -> float:
    """Smallest absolute angular difference modulo the period."""
    d = (a - b) % period
    return min(d, period - d)


def match_elements(recovered, truth, max_center_distance: float = 1.0,
                   max_orientation_error: float | None = None,
                   require_type: bool = True):
    """Optimal one-to-one assignment between recovered and true elements.

    Returns matched index pairs, false positives (unmatched recovered)
    and false negatives (unmatched truth). A pair may match only within
    the center gate, with equal type when required, and within the
    orientation gate when given.
    """
    nr, nt = len(recovered), len(truth)
    big = 1e9
    cost = np.full((nr, nt), big)
    for i, r in enumerate(recovered):
        for j, t in enumerate(truth):
            d = math.hypot(r.center[0] - t.center[0], r.center[1] - t.center[1])
            if d > max_center_distance:
                continue
            if require_type and r.type_index != t.type_index:
                continue
            if max_orientation_error is not None and \
                    angle_difference(r.orientation, t.orientation) > max_orientation_error:
                continue
            cost[i, j] = d
    pairs = []
    if nr and nt:
        ri, tj = linear_sum_assignment(cost)
        pairs = [(int(i), int(j)) for i, j in zip(ri, tj) if cost[i, j] < big]
    matched_r = {i for i, _ in pairs}
    matched_t = {j for _, j in pairs}
    return {
        "pairs": pairs,
        "false_positives": [i for i in range(nr) if i not in matched_r],
        "false_negatives": [j for j in range(nt) if j not in matched_t],
        "center_errors": [float(cost[i, j]) for i, j in pairs],
    }


def depth_order_consistent(recovered, truth, pairs, library: PatchLibrary,
                           canvas, min_contrast: float = 0.05) -> bool:
    """Every overlapping ground-truth pair must keep its depth order.

    Pairs whose two stacking orders render (nearly) identically on the
    overlap carry no order information in the image and are skipped;
    ``min_contrast`` is the per-channel difference that makes an overlap
    observable.
    """
    stamps = [hard_element_stamp(t, library, canvas) for t in truth]
    by_truth = {j: i for i, j in pairs}
    for a in range(len(truth)):
        for b in range(a + 1, len(truth)):
            if a not in by_truth or b not in by_truth:
                continue
            rgb_a, mask_a = stamps[a]
            rgb_b, mask_b = stamps[b]
            both = mask_a & mask_b
            if not np.any(both):
                continue
            if np.abs(rgb_a[both] - rgb_b[both]).max() < min_contrast:
                continue
            true_order = truth[a].depth > truth[b].depth
            rec_order = recovered[by_truth[a]].depth > recovered[by_truth[b]].depth
            if true_order != rec_order:
                return False
    return True


def mean_l2(image_a, image_b) -> float:
    """Mean per-pixel squared RGB distance (colors in [0, 1])."""
    diff = image_a.rgb - image_b.rgb
    return float((diff * diff).sum()) / (diff.shape[0] * diff.shape[1])


def element_integrity(discrete, library: PatchLibrary, composite) -> bool:
    """Each rendered element must be an exact rigid instance of its patch:
    wherever an element is the visible winner, the composite equals that
    element's lone nearest-neighbor stamp bit-exactly."""
    canvas = (composite.width, composite.height)
    order = sorted(range(len(discrete)), key=lambda i: (discrete[i].depth, i))
    winner = np.full((composite.height, composite.width), -1)
    stamps = [hard_element_stamp(e, library, canvas) for e in discrete]
    for i in order:
        winner[stamps[i][1]] = i
    for i, (rgb, covered) in enumerate(stamps):
        sel = covered & (winner == i)
        if not np.array_equal(composite.rgb[sel], rgb[sel]):
            return False
    return True


def hard_overlap_loss(discrete, library: PatchLibrary, canvas) -> float:
    """Overlap penalty of discretized masks (hinge on the coverage sum)."""
    w, h = int(canvas[0]), int(canvas[1])
    total = np.zeros((h, w))
    for e in discrete:
        total += hard_element_stamp(e, library, canvas)[1]
    return float(np.maximum(0.0, total - 1.0).sum()) / (w * h)
