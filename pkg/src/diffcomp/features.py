"""Fixed multi-scale convolution bank used by the style loss.

The extractor is a stack of 3x3 same-padding convolutions (reflect
boundary), leaky rectifiers, and 2x average pooling. Its weights are a
pure function of the seed via SplitMix64, so feature statistics are
reproducible across platforms without shipping any trained weights.
An optional loader can swap in externally converted filters with the
same stage shapes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .core import RgbmImage
from .seeds import stream

DEFAULT_CHANNELS = (16, 32, 64, 64)
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class FeatureExtractor:
    stages: tuple            # of (out, in, k, k) float weight arrays
    slope: float = LEAKY_SLOPE
    tap_points: tuple = ()   # stage indices exposed as style levels
    seed: int = 0

    @property
    def num_taps(self) -> int:
        return len(self.tap_points)

    def min_input_size(self) -> int:
        # Reflect padding needs >= 2 pixels at the deepest convolution.
        return 2 ** len(self.stages)


def make_fixed_extractor(seed: int, channels=DEFAULT_CHANNELS,
                         kernel_size: int = 3, in_channels: int = 3) -> FeatureExtractor:
    """Build the seeded extractor; same seed -> bit-identical weights.

    Weights are zero-mean uniform scaled by 1/sqrt(fan-in), drawn from a
    per-stage SplitMix64 stream.
    """
    if len(channels) < 1:
        raise ValueError("extractor needs at least one stage")
    if kernel_size % 2 != 1:
        raise ValueError("kernel size must be odd")
    stages = []
    cin = in_channels
    for s, cout in enumerate(channels):
        gen = stream(seed, f"extractor-stage{s}")
        fan_in = cin * kernel_size * kernel_size
        scale = 1.0 / np.sqrt(fan_in)
        count = cout * fan_in
        w = np.array([gen.uniform(-scale, scale) for _ in range(count)])
        stages.append(w.reshape(cout, cin, kernel_size, kernel_size))
        cin = cout
    return FeatureExtractor(stages=tuple(stages), tap_points=tuple(range(len(channels))),
                            seed=seed)


# ---------------------------------------------------------------------------
# Forward / backward primitives

def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(x, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")


def _conv_same(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    cout, cin, k, _ = weights.shape
    pad = k // 2
    h, w = x.shape[:2]
    xp = _reflect_pad(x, pad)
    cols = np.empty((h, w, k, k, cin))
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx, :] = xp[ky:ky + h, kx:kx + w, :]
    flat = cols.reshape(h * w, k * k * cin)
    wmat = weights.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    return (flat @ wmat.T).reshape(h, w, cout)


def _conv_same_backward(g: np.ndarray, weights: np.ndarray, in_shape) -> np.ndarray:
    """Adjoint of _conv_same with respect to its input (reflect fold included)."""
    cout, cin, k, _ = weights.shape
    pad = k // 2
    h, w = in_shape[:2]
    wmat = weights.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    gcols = (g.reshape(h * w, cout) @ wmat).reshape(h, w, k, k, cin)
    gp = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    for ky in range(k):
        for kx in range(k):
            gp[ky:ky + h, kx:kx + w, :] += gcols[:, :, ky, kx, :]
    # Fold reflected rows/columns back onto their interior sources:
    # pad row p mirrors interior row (pad - p) at the top and (h - 2 - p)
    # at the bottom, and likewise for columns.
    core_rows = np.ascontiguousarray(gp[pad:pad + h])
    for p in range(pad):
        core_rows[pad - p] += gp[p]
        core_rows[h - 2 - p] += gp[h + pad + p]
    out = np.ascontiguousarray(core_rows[:, pad:pad + w])
    for p in range(pad):
        out[:, pad - p] += core_rows[:, p]
        out[:, w - 2 - p] += core_rows[:, w + pad + p]
    return out


def _pool2(x: np.ndarray) -> np.ndarray:
    h2, w2 = x.shape[0] // 2, x.shape[1] // 2
    v = x[:2 * h2, :2 * w2]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def _pool2_backward(g: np.ndarray, in_shape) -> np.ndarray:
    out = np.zeros(in_shape)
    h2, w2 = g.shape[:2]
    q = 0.25 * g
    out[0:2 * h2:2, 0:2 * w2:2] += q
    out[1:2 * h2:2, 0:2 * w2:2] += q
    out[0:2 * h2:2, 1:2 * w2:2] += q
    out[1:2 * h2:2, 1:2 * w2:2] += q
    return out


@dataclass
class FeatureTape:
    input_shape: tuple
    stage_inputs: list        # shapes of each stage input
    positive: list            # pre-activation sign masks per stage


def _image_rgb(image) -> np.ndarray:
    if isinstance(image, RgbmImage):
        return image.rgb
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] < 3:
        raise ValueError("expected an RGB(M) image array")
    return arr[:, :, :3]


def extract_with_tape(extractor: FeatureExtractor, image):
    """Forward through all stages; returns (tap feature maps, tape)."""
    x = _image_rgb(image)
    min_size = extractor.min_input_size()
    if min(x.shape[0], x.shape[1]) < min_size:
        raise ValueError(
            f"image {x.shape[1]}x{x.shape[0]} too small for the extractor; "
            f"minimum size is {min_size}x{min_size}")
    taps = []
    tape = FeatureTape(input_shape=x.shape, stage_inputs=[], positive=[])
    n_stages = len(extractor.stages)
    for s, wgt in enumerate(extractor.stages):
        tape.stage_inputs.append(x.shape)
        pre = _conv_same(x, wgt)
        pos = pre > 0
        tape.positive.append(pos)
        act = np.where(pos, pre, extractor.slope * pre)
        if s in extractor.tap_points:
            taps.append(act)
        x = _pool2(act) if s < n_stages - 1 else act
    return taps, tape


def extract(extractor: FeatureExtractor, image):
    """Feature maps (h_l, w_l, n_l) at every tap point."""
    taps, _ = extract_with_tape(extractor, image)
    return taps


def feature_backward(extractor: FeatureExtractor, tape: FeatureTape,
                     tap_adjoints) -> np.ndarray:
    """Adjoints on the tap feature maps -> adjoint on the input RGB image."""
    if len(tap_adjoints) != extractor.num_taps:
        raise ValueError(f"expected {extractor.num_taps} tap adjoints, got {len(tap_adjoints)}")
    n_stages = len(extractor.stages)
    tap_for_stage = {t: i for i, t in enumerate(extractor.tap_points)}
    g = None
    for s in range(n_stages - 1, -1, -1):
        act_shape = tape.positive[s].shape
        if g is None:
            g_act = np.zeros(act_shape)
        elif s < n_stages - 1:
            g_act = _pool2_backward(g, act_shape)
        else:
            g_act = g
        if s in tap_for_stage:
            adj = np.asarray(tap_adjoints[tap_for_stage[s]], dtype=np.float64)
            if adj.shape != act_shape:
                raise ValueError(f"tap {tap_for_stage[s]} adjoint shape {adj.shape} "
                                 f"does not match features {act_shape}")
            g_act = g_act + adj
        g_pre = np.where(tape.positive[s], g_act, extractor.slope * g_act)
        g = _conv_same_backward(g_pre, extractor.stages[s], tape.stage_inputs[s])
    return g


# ---------------------------------------------------------------------------
# Optional weights file (JSON header line + little-endian float32 payload)

def save_extractor_weights(path, extractor: FeatureExtractor) -> None:
    header = {
        "stages": [list(w.shape) for w in extractor.stages],
        "slope": extractor.slope,
        "tap_points": list(extractor.tap_points),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for w in extractor.stages:
            fh.write(struct.pack(f"<{w.size}f", *w.astype(np.float32).ravel()))


def load_extractor_weights(path) -> FeatureExtractor:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        stages = []
        for shape in header["stages"]:
            count = int(np.prod(shape))
            data = fh.read(4 * count)
            if len(data) != 4 * count:
                raise ValueError("weights file truncated")
            w = np.array(struct.unpack(f"<{count}f", data), dtype=np.float64)
            stages.append(w.reshape(shape))
    return FeatureExtractor(stages=tuple(stages), slope=float(header.get("slope", LEAKY_SLOPE)),
                            tap_points=tuple(header.get("tap_points", range(len(stages)))),
                            seed=-1)
