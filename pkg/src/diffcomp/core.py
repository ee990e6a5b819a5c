"""Domain types shared by every other module.

Conventions used throughout the package:

* Images are numpy float64 arrays of shape (height, width, 4) holding
  (r, g, b, m) per pixel, nominal range [0, 1]. ``m`` is the coverage
  mask: binary for library patches, continuous for soft composites.
* Canvas coordinates are in pixels with the origin at the top-left
  pixel center; ``x`` runs along columns, ``y`` along rows. An element
  center ``c`` lives in these units.
* Patch-local coordinates put the origin at the patch center, so
  rotation happens about the element center.
* Element colors are raw parameters; the leaky hard sigmoid applied at
  render time maps them to RGB multipliers (see compositor module).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

ELEMENTS_FORMAT = "diffcomp-elements-v1"


class PatchLoadError(Exception):
    """Raised when a patch or background file cannot be used."""


# ---------------------------------------------------------------------------
# Images

@dataclass(frozen=True)
class RgbmImage:
    """A 4-channel (red, green, blue, mask) raster."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 4 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"RGBM data must have shape (h, w, 4), got {d.shape}")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def rgb(self) -> np.ndarray:
        return self.data[:, :, :3]

    @property
    def mask(self) -> np.ndarray:
        return self.data[:, :, 3]

    @staticmethod
    def from_channels(rgb: np.ndarray, mask: np.ndarray) -> "RgbmImage":
        return RgbmImage(np.dstack([np.asarray(rgb, dtype=np.float64),
                                    np.asarray(mask, dtype=np.float64)]))

    @staticmethod
    def constant(width: int, height: int, rgb, mask: float = 1.0) -> "RgbmImage":
        data = np.empty((height, width, 4))
        data[:, :, :3] = np.asarray(rgb, dtype=np.float64)
        data[:, :, 3] = mask
        return RgbmImage(data)


def read_png_rgbm(path, binarize_mask: bool = False, require_alpha: bool = True) -> RgbmImage:
    """Decode an 8-bit PNG into [0,1] reals.

    Library patches require an alpha channel; it is binarized at 0.5 to
    produce the coverage mask. Flat pattern images may omit alpha, in
    which case the mask is all ones.
    """
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise PatchLoadError(f"cannot read image {path!r}: {exc}") from exc
    if img.width < 1 or img.height < 1:
        raise PatchLoadError(f"zero-size image: {path!r}")
    has_alpha = img.mode in ("RGBA", "LA", "PA") or "transparency" in img.info
    if require_alpha and not has_alpha:
        raise PatchLoadError(f"image {path!r} has no alpha channel (mode {img.mode})")
    arr = np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0
    if binarize_mask:
        arr[:, :, 3] = (arr[:, :, 3] >= 0.5).astype(np.float64)
    return RgbmImage(arr)


def write_png_rgbm(path, image: RgbmImage) -> None:
    """Encode to 8-bit RGBA with round-half-up quantization."""
    q = np.floor(np.clip(image.data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q, mode="RGBA").save(path)


def write_png_rgb(path, rgb: np.ndarray) -> None:
    q = np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# Patch library

@dataclass(frozen=True)
class PatchLibrary:
    """The atomic element-type patches plus the background.

    ``patches[j]`` is element type ``j + 1`` (type indices are 1-based in
    discrete outputs). The background is either a constant RGB color or a
    full canvas-sized patch used by the traditional pipeline.
    ``sample_spacing`` is canvas pixels per patch pixel along (x, y).
    """

    patches: tuple
    background_color: tuple = (1.0, 1.0, 1.0)
    background_image: RgbmImage | None = None
    sample_spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        if len(self.patches) < 1:
            raise PatchLoadError("library must contain at least one patch")
        if self.sample_spacing[0] <= 0 or self.sample_spacing[1] <= 0:
            raise ValueError("sample spacing components must be positive")
        for j, p in enumerate(self.patches):
            m = p.mask
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ValueError(f"patch {j} mask is not binary")

    @property
    def num_types(self) -> int:
        return len(self.patches)

    def mask_extent(self, j: int) -> float:
        """Larger side of patch j's mask bounding box, in canvas pixels."""
        m = self.patches[j].mask
        ys, xs = np.nonzero(m)
        if ys.size == 0:
            return 0.0
        rx, ry = self.sample_spacing
        return max((xs.max() - xs.min() + 1) * rx, (ys.max() - ys.min() + 1) * ry)

    def max_footprint_radius(self) -> float:
        """Circumradius of the largest patch plus kernel support."""
        rx, ry = self.sample_spacing
        rad = 0.0
        for p in self.patches:
            hw = (p.width - 1) / 2.0 * rx
            hh = (p.height - 1) / 2.0 * ry
            rad = max(rad, math.hypot(hw, hh))
        return rad + max(rx, ry)


def load_patch_library(patch_files, background=(1.0, 1.0, 1.0),
                       sample_spacing=(1.0, 1.0)) -> PatchLibrary:
    """Load patches from disk in file order (file j -> type j+1).

    ``background`` is either an (r, g, b) tuple or a path to a PNG used as
    a full background patch.
    """
    if not patch_files:
        raise PatchLoadError("library must contain at least one patch")
    patches = tuple(read_png_rgbm(p, binarize_mask=True) for p in patch_files)
    bg_color = (1.0, 1.0, 1.0)
    bg_image = None
    if isinstance(background, (str, Path)):
        bg_image = read_png_rgbm(background, require_alpha=False)
        bg_color = tuple(float(v) for v in bg_image.rgb.reshape(-1, 3).mean(axis=0))
    elif background is not None:
        bg_color = tuple(float(v) for v in background)
        if len(bg_color) != 3:
            raise PatchLoadError("background color must have three components")
    return PatchLibrary(patches=patches, background_color=bg_color,
                        background_image=bg_image, sample_spacing=tuple(sample_spacing))


# ---------------------------------------------------------------------------
# Elements

@dataclass(frozen=True)
class Element:
    """One placed instance of a library patch, soft parameterization."""

    type_logits: np.ndarray   # (m,)
    center: np.ndarray        # (2,) canvas pixels
    orientation: float        # radians, unconstrained
    depth: float              # unconstrained
    color: np.ndarray         # (3,) raw color parameters
    alive: bool = True


@dataclass(frozen=True)
class DiscreteElement:
    """Hard element: argmax type, renderable by the traditional pipeline."""

    type_index: int           # 1-based index into the library
    center: tuple
    orientation: float
    depth: float
    color: tuple = (10.0, 10.0, 10.0)


@dataclass(frozen=True)
class ElementSet:
    """Optimization state: per-element parameters plus background.

    Stored as column arrays for vectorized math; ``elements`` offers the
    per-element view. Arrays are read-only after construction; producing
    a modified set always allocates new arrays.
    """

    type_logits: np.ndarray       # (n, m)
    centers: np.ndarray           # (n, 2)
    orientations: np.ndarray      # (n,)
    depths: np.ndarray            # (n,)
    colors: np.ndarray            # (n, 3)
    alive: np.ndarray             # (n,) bool
    background_color: np.ndarray  # (3,)
    background_depth: float

    def __post_init__(self):
        n = self.type_logits.shape[0]
        for name, arr, shape in (
            ("type_logits", self.type_logits, (n, self.type_logits.shape[1] if self.type_logits.ndim == 2 else -1)),
            ("centers", self.centers, (n, 2)),
            ("orientations", self.orientations, (n,)),
            ("depths", self.depths, (n,)),
            ("colors", self.colors, (n, 3)),
        ):
            a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
            if a.shape != shape:
                raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        al = np.ascontiguousarray(np.asarray(self.alive, dtype=bool))
        if al.shape != (n,):
            raise ValueError("alive flags must be one per element")
        al.flags.writeable = False
        object.__setattr__(self, "alive", al)
        bg = np.ascontiguousarray(np.asarray(self.background_color, dtype=np.float64))
        if bg.shape != (3,):
            raise ValueError("background color must have three components")
        bg.flags.writeable = False
        object.__setattr__(self, "background_color", bg)
        object.__setattr__(self, "background_depth", float(self.background_depth))

    @property
    def count(self) -> int:
        return self.type_logits.shape[0]

    @property
    def num_types(self) -> int:
        return self.type_logits.shape[1]

    @property
    def elements(self) -> list[Element]:
        return [Element(self.type_logits[i].copy(), self.centers[i].copy(),
                        float(self.orientations[i]), float(self.depths[i]),
                        self.colors[i].copy(), bool(self.alive[i]))
                for i in range(self.count)]

    @staticmethod
    def from_elements(elements, background_color, background_depth) -> "ElementSet":
        if elements:
            m = len(elements[0].type_logits)
        else:
            m = 0
        return ElementSet(
            type_logits=np.array([e.type_logits for e in elements], dtype=np.float64).reshape(len(elements), m),
            centers=np.array([e.center for e in elements], dtype=np.float64).reshape(len(elements), 2),
            orientations=np.array([e.orientation for e in elements], dtype=np.float64),
            depths=np.array([e.depth for e in elements], dtype=np.float64),
            colors=np.array([e.color for e in elements], dtype=np.float64).reshape(len(elements), 3),
            alive=np.array([e.alive for e in elements], dtype=bool),
            background_color=np.asarray(background_color, dtype=np.float64),
            background_depth=background_depth,
        )

    def with_arrays(self, **updates) -> "ElementSet":
        return replace(self, **updates)


def validate_element_set(element_set: ElementSet, library: PatchLibrary) -> list[str]:
    """Return violations (empty list when the set is consistent)."""
    violations = []
    m = library.num_types
    if element_set.num_types != m:
        violations.append(
            f"logit vectors have {element_set.num_types} entries, library has {m} types")
    for i in range(element_set.count):
        row = np.concatenate([
            element_set.type_logits[i], element_set.centers[i],
            [element_set.orientations[i], element_set.depths[i]],
            element_set.colors[i]])
        if not np.all(np.isfinite(row)):
            violations.append(f"element {i} has non-finite parameters")
    if not np.all(np.isfinite(element_set.background_color)) or \
            not math.isfinite(element_set.background_depth):
        violations.append("background parameters are non-finite")
    return violations


# ---------------------------------------------------------------------------
# Element-set JSON (format diffcomp-elements-v1)

def element_set_to_json(element_set: ElementSet, canvas) -> dict:
    return {
        "format": ELEMENTS_FORMAT,
        "canvas": [int(canvas[0]), int(canvas[1])],
        "background": {
            "color": [float(v) for v in element_set.background_color],
            "depth": float(element_set.background_depth),
        },
        "elements": [
            {
                "type_logits": [float(v) for v in element_set.type_logits[i]],
                "center": [float(element_set.centers[i, 0]), float(element_set.centers[i, 1])],
                "orientation": float(element_set.orientations[i]),
                "depth": float(element_set.depths[i]),
                "color": [float(v) for v in element_set.colors[i]],
            }
            for i in range(element_set.count) if element_set.alive[i]
        ],
    }


def discrete_elements_to_json(elements, background_color, background_depth, canvas) -> dict:
    return {
        "format": ELEMENTS_FORMAT,
        "canvas": [int(canvas[0]), int(canvas[1])],
        "background": {
            "color": [float(v) for v in background_color],
            "depth": float(background_depth),
        },
        "elements": [
            {
                "type": int(e.type_index),
                "center": [float(e.center[0]), float(e.center[1])],
                "orientation": float(e.orientation),
                "depth": float(e.depth),
                "color": [float(v) for v in e.color],
            }
            for e in elements
        ],
    }


def element_set_from_json(doc: dict) -> tuple:
    """Parse a soft element-set document -> (ElementSet, canvas)."""
    if doc.get("format") != ELEMENTS_FORMAT:
        raise ValueError(f"unsupported element file format: {doc.get('format')!r}")
    elems = doc["elements"]
    if elems and "type" in elems[0]:
        raise ValueError("document holds discrete elements; use discrete_elements_from_json")
    m = len(elems[0]["type_logits"]) if elems else 1
    es = ElementSet(
        type_logits=np.array([e["type_logits"] for e in elems], dtype=np.float64).reshape(len(elems), m),
        centers=np.array([e["center"] for e in elems], dtype=np.float64).reshape(len(elems), 2),
        orientations=np.array([e["orientation"] for e in elems], dtype=np.float64),
        depths=np.array([e["depth"] for e in elems], dtype=np.float64),
        colors=np.array([e["color"] for e in elems], dtype=np.float64).reshape(len(elems), 3),
        alive=np.ones(len(elems), dtype=bool),
        background_color=np.asarray(doc["background"]["color"], dtype=np.float64),
        background_depth=float(doc["background"]["depth"]),
    )
    return es, tuple(doc["canvas"])


def discrete_elements_from_json(doc: dict) -> tuple:
    """Parse a discrete document -> (elements, background_color, background_depth, canvas)."""
    if doc.get("format") != ELEMENTS_FORMAT:
        raise ValueError(f"unsupported element file format: {doc.get('format')!r}")
    elems = [
        DiscreteElement(type_index=int(e["type"]),
                        center=tuple(float(v) for v in e["center"]),
                        orientation=float(e["orientation"]),
                        depth=float(e["depth"]),
                        color=tuple(float(v) for v in e["color"]))
        for e in doc["elements"]
    ]
    bg = doc["background"]
    return elems, tuple(bg["color"]), float(bg["depth"]), tuple(doc["canvas"])


def save_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
