"""Image-space objectives and the adjoints the gradient module consumes.

Every loss returns a LossValue: the scalar, per-pyramid-level RGB
adjoint images, and (for the overlap loss only) a full-resolution
adjoint that applies to each element's coverage mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .compositor import Layer, Pyramid
from .core import RgbmImage
from .features import FeatureExtractor, extract_with_tape, feature_backward

DEFAULT_STYLE_WEIGHTS = (0.2, 0.2, 0.2, 0.2)


@dataclass
class LossValue:
    value: float
    level_adjoints: list = field(default_factory=list)  # (h_k, w_k, 3) or None per level
    mask_adjoint: np.ndarray | None = None              # (h, w), per-layer mask route


def l2_loss(target_pyramid: Pyramid, composite_pyramid: Pyramid,
            level_weights=None) -> LossValue:
    """Mean squared RGB distance, summed over pyramid levels.

    Per level: (1/P) sum_p ||A - I||^2 with adjoint (2/P)(I - A).
    Levels carry equal weight unless ``level_weights`` says otherwise.
    """
    if target_pyramid.depth != composite_pyramid.depth:
        raise ValueError("pyramids have different depths")
    if level_weights is None:
        level_weights = (1.0,) * target_pyramid.depth
    if len(level_weights) != target_pyramid.depth:
        raise ValueError("one level weight per pyramid level required")
    total = 0.0
    adjoints = []
    for wk, a_img, i_img in zip(level_weights, target_pyramid.levels,
                                composite_pyramid.levels):
        if a_img.data.shape != i_img.data.shape:
            raise ValueError(f"level shape mismatch: {a_img.data.shape} vs {i_img.data.shape}")
        p = a_img.height * a_img.width
        diff = i_img.rgb - a_img.rgb
        total += wk * float((diff * diff).sum()) / p
        adjoints.append((2.0 * wk / p) * diff)
    return LossValue(value=total, level_adjoints=adjoints)


def gram_matrix(features: np.ndarray) -> np.ndarray:
    """Channel-by-channel inner products F F^T of an (h, w, c) feature map.

    No normalization here; position-count factors belong to the style loss.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 3:
        f = f.reshape(-1, f.shape[2]).T
    elif f.ndim != 2:
        raise ValueError("expected (h, w, c) map or (c, m) matrix")
    if f.shape[1] < 1:
        raise ValueError("feature map needs at least one spatial position")
    return f @ f.T


@dataclass(frozen=True)
class StyleTarget:
    """Pre-reduced target statistics: per tap, Gram / positions and sizes."""

    norm_grams: tuple
    positions: tuple


def style_targets(target, extractor: FeatureExtractor) -> StyleTarget:
    taps, _ = extract_with_tape(extractor, target)
    grams = []
    counts = []
    for f in taps:
        m = f.shape[0] * f.shape[1]
        grams.append(gram_matrix(f) / m)
        counts.append(m)
    return StyleTarget(norm_grams=tuple(grams), positions=tuple(counts))


def style_loss_from_targets(target_stats: StyleTarget, composite_pyramid: Pyramid,
                            extractor: FeatureExtractor, layer_weights) -> LossValue:
    """Gram-statistic mismatch on the full-resolution composite.

    Each image's Gram matrix is normalized by its own position count so
    statistics stay comparable when exemplar and composite differ in
    size; the per-level weighting matches w_l / (n_l m_l) ||G_A - G_I||_F^2
    whenever the sizes agree.
    """
    weights = tuple(float(v) for v in layer_weights)
    if len(weights) != extractor.num_taps:
        raise ValueError(f"{len(weights)} layer weights for {extractor.num_taps} extractor taps")
    if len(target_stats.norm_grams) != extractor.num_taps:
        raise ValueError("target statistics do not match the extractor")
    full = composite_pyramid.levels[0]
    taps, tape = extract_with_tape(extractor, full)
    value = 0.0
    tap_adjoints = []
    for w_l, f, g_a, m_a in zip(weights, taps, target_stats.norm_grams,
                                target_stats.positions):
        h, w, n_l = f.shape
        m_i = h * w
        fmat = f.reshape(m_i, n_l).T
        g_i = (fmat @ fmat.T) / m_i
        diff = g_i - g_a
        value += w_l * m_a / n_l * float((diff * diff).sum())
        d_f = (4.0 * w_l * m_a / (n_l * m_i)) * (diff @ fmat)
        tap_adjoints.append(d_f.T.reshape(h, w, n_l))
    image_adj = feature_backward(extractor, tape, tap_adjoints)
    adjoints = [image_adj] + [None] * (composite_pyramid.depth - 1)
    return LossValue(value=value, level_adjoints=adjoints)


def style_loss(target, composite_pyramid: Pyramid, extractor: FeatureExtractor,
               layer_weights=DEFAULT_STYLE_WEIGHTS) -> LossValue:
    return style_loss_from_targets(style_targets(target, extractor),
                                   composite_pyramid, extractor, layer_weights)


def overlap_loss_from_coverage(cover_sum: np.ndarray) -> LossValue:
    """Hinge on the per-pixel sum of element coverage masks.

    (1/P) sum_p max(0, -1 + sum_k M_k); the adjoint is the same for every
    layer's mask, so a single image serves all elements.
    """
    s = np.asarray(cover_sum, dtype=np.float64)
    p = s.size
    excess = np.maximum(0.0, s - 1.0)
    value = float(excess.sum()) / p
    mask_adj = (s > 1.0).astype(np.float64) / p
    return LossValue(value=value, mask_adjoint=mask_adj)


def overlap_loss(masks) -> LossValue:
    """Overlap penalty over explicit per-layer masks (background excluded)."""
    masks = [np.asarray(m, dtype=np.float64) for m in masks]
    if not masks:
        raise ValueError("overlap loss needs at least one mask")
    total = np.zeros_like(masks[0])
    for m in masks:
        if m.shape != total.shape:
            raise ValueError("masks must share the canvas shape")
        total += m
    return overlap_loss_from_coverage(total)


def masked_match_distance(image: RgbmImage, candidate: Layer,
                          min_overlap_fraction: float = 0.1) -> float:
    """Occupancy-normalized squared distance between an element layer and
    an image region; +inf when the mask overlap is below the threshold
    fraction of the element's non-zero mask pixels."""
    m_a = image.mask
    m_j = candidate.image.mask
    if m_a.shape != m_j.shape:
        raise ValueError("candidate layer does not match the image size")
    nz = float(np.count_nonzero(m_j))
    if nz == 0:
        return math.inf
    weights = m_a * m_j
    count = float(weights.sum())
    if count < min_overlap_fraction * nz:
        return math.inf
    diff = candidate.image.rgb - image.rgb
    return float((weights * (diff * diff).sum(axis=2)).sum()) / count
