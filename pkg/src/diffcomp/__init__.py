"""Differentiable compositing of discrete pattern elements.

A library and CLI for decomposing flat pattern images into editable,
depth-ordered elements, and for synthesizing new element layouts
(expansion, tiling, mosaics) by gradient descent on image-space losses.
"""

from .core import (DiscreteElement, Element, ElementSet, PatchLibrary,
                   PatchLoadError, RgbmImage, load_patch_library,
                   validate_element_set)
from .compositor import (Layer, Pyramid, build_pyramid, composite_hard,
                         composite_soft, composite_set, sample_patch,
                         transform_element)
from .grad import (GradientTape, ParamGradients, backward,
                   finite_diff_gradients, forward_with_tape)
from .losses import (LossValue, gram_matrix, l2_loss, masked_match_distance,
                     overlap_loss, style_loss)
from .features import FeatureExtractor, extract, make_fixed_extractor

__version__ = "0.1.0"

__all__ = [
    "DiscreteElement", "Element", "ElementSet", "PatchLibrary",
    "PatchLoadError", "RgbmImage", "load_patch_library", "validate_element_set",
    "Layer", "Pyramid", "build_pyramid", "composite_hard", "composite_soft",
    "composite_set", "sample_patch", "transform_element",
    "GradientTape", "ParamGradients", "backward", "finite_diff_gradients",
    "forward_with_tape",
    "LossValue", "gram_matrix", "l2_loss", "masked_match_distance",
    "overlap_loss", "style_loss",
    "FeatureExtractor", "extract", "make_fixed_extractor",
    "__version__",
]
