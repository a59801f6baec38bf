"""ROI-masked convolution and its supporting geometry.

Candidate boxes from the pre-filter are bucketed into scale octaves, each
octave gets a half-sampled pyramid level plus a binary occupancy mask, and
convolution layers gather only the patches whose output centers fall inside
the mask. The gathered patch matrix is multiplied against the reshaped filter
bank exactly like the dense im2col path, so masked positions are bit-equal to
dense convolution while skipped positions cost nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ConvSpec, ShapeError, _pad_chw

# Smallest face the downstream network resolves; octave k covers sizes
# [MIN_FACE * 2^k, 2 * MIN_FACE * 2^k).
MIN_FACE = 36
DEFAULT_RF_CAP = 85


class RoiMask:
    """Immutable binary occupancy grid over an image plane."""

    def __init__(self, bits: np.ndarray):
        bits = np.ascontiguousarray(np.asarray(bits, dtype=bool))
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        bits.flags.writeable = False
        self.bits = bits

    @classmethod
    def zeros(cls, height: int, width: int) -> "RoiMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def ones(cls, height: int, width: int) -> "RoiMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def ones_count(self) -> int:
        return int(self.bits.sum())

    @property
    def sparsity(self) -> float:
        """Fraction of positions marked 1, in [0, 1]."""
        return self.ones_count / self.bits.size

    def __eq__(self, other):
        return isinstance(other, RoiMask) and np.array_equal(self.bits, other.bits)


@dataclass
class ScaleGroup:
    """Candidates whose sizes span one factor-of-two octave."""

    octave_index: int
    candidates: list = field(default_factory=list)  # (x, y, w, h) at original res

    @property
    def scale_factor(self) -> float:
        return 2.0 ** (-self.octave_index)

    @property
    def min_face(self) -> int:
        return MIN_FACE * 2**self.octave_index

    @property
    def max_face(self) -> int:
        return 2 * self.min_face

    def scaled_candidates(self) -> list:
        """Candidate boxes rescaled to this octave's pyramid level."""
        s = self.scale_factor
        return [(x * s, y * s, w * s, h * s) for (x, y, w, h) in self.candidates]


def group_candidates(candidates, image_size=None) -> list[ScaleGroup]:
    """Bucket boxes into scale octaves by their larger side.

    Boxes smaller than the detector minimum (36 px) are discarded; every
    retained box lands in exactly one octave and measures within [36, 72)
    after downsampling by the octave's scale factor.
    """
    groups: dict[int, ScaleGroup] = {}
    for box in candidates:
        x, y, w, h = box
        size = max(w, h)
        if size < MIN_FACE:
            continue
        k = int(np.floor(np.log2(size / MIN_FACE)))
        groups.setdefault(k, ScaleGroup(k)).candidates.append((x, y, w, h))
    return [groups[k] for k in sorted(groups)]


def build_mask(scaled_candidates, level_size, receptive_field_cap=DEFAULT_RF_CAP) -> RoiMask:
    """Union of candidate footprints: each box keeps its center, doubles each
    side (capped at the receptive field), and is clipped to the level bounds."""
    height, width = level_size
    bits = np.zeros((height, width), dtype=bool)
    for x, y, w, h in scaled_candidates:
        cx, cy = x + w / 2.0, y + h / 2.0
        ww = min(2.0 * w, float(receptive_field_cap))
        hh = min(2.0 * h, float(receptive_field_cap))
        x0 = int(round(cx - ww / 2.0))
        y0 = int(round(cy - hh / 2.0))
        x1 = x0 + int(round(ww))
        y1 = y0 + int(round(hh))
        bits[max(0, y0) : max(0, min(y1, height)), max(0, x0) : max(0, min(x1, width))] = True
    return RoiMask(bits)


def downsample_mask(mask: RoiMask) -> RoiMask:
    """Half-sample a mask: a low-res cell is 1 iff any of its 2x2 block is 1.

    OR-pooling is the only halving rule that never starves a later layer of
    an input the dense stack would have computed.
    """
    bits = mask.bits
    h, w = bits.shape
    padded = np.zeros((h + h % 2, w + w % 2), dtype=bool)
    padded[:h, :w] = bits
    blocks = padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2)
    return RoiMask(blocks.any(axis=(1, 3)))


def roi_im2col(x: np.ndarray, mask: RoiMask, spec: ConvSpec):
    """Gather only the patches whose output centers are marked in the mask.

    Returns (data matrix of shape (M, C*K*K), flat output positions in
    row-major order), M being the mask's ones count.
    """
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ShapeError(f"expected ({spec.in_channels}, H, W) input, got {x.shape}")
    out_h, out_w = spec.out_size(x.shape[1], x.shape[2])
    if (mask.height, mask.width) != (out_h, out_w):
        raise ShapeError(
            f"mask is {mask.height}x{mask.width}, convolution output is {out_h}x{out_w}"
        )
    positions = np.flatnonzero(mask.bits)
    c, k, s = spec.in_channels, spec.kernel, spec.stride
    if positions.size == 0:
        return np.zeros((0, c * k * k), dtype=x.dtype), positions
    oy, ox = np.divmod(positions, out_w)
    padded = _pad_chw(x, spec.padding)
    chan = np.repeat(np.arange(c), k * k).reshape(-1, 1)
    ky = np.tile(np.repeat(np.arange(k), k), c).reshape(-1, 1)
    kx = np.tile(np.tile(np.arange(k), k), c).reshape(-1, 1)
    cols = padded[chan, ky + s * oy.reshape(1, -1), kx + s * ox.reshape(1, -1)]
    return cols.T.copy(), positions


def roi_conv_forward(
    x: np.ndarray,
    filters: np.ndarray,
    mask: RoiMask,
    spec: ConvSpec,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Convolution evaluated only at masked output positions; all other
    positions are exactly zero."""
    out_h, out_w = spec.out_size(x.shape[1], x.shape[2])
    cols, positions = roi_im2col(x, mask, spec)
    out = np.zeros((spec.out_channels, out_h * out_w), dtype=x.dtype)
    if positions.size:
        vals = cols @ filters.reshape(spec.out_channels, -1).T
        if bias is not None:
            vals += bias
        out[:, positions] = vals.T
    return out.reshape(spec.out_channels, out_h, out_w)


def roi_conv_macs(mask: RoiMask, spec: ConvSpec) -> int:
    """Multiply-accumulate count of the masked filter product: M*C*K^2*N.
    Gather and scatter overhead is excluded; wall-clock benchmarks carry it."""
    return mask.ones_count * spec.in_channels * spec.kernel**2 * spec.out_channels


@dataclass(frozen=True)
class LayerRfSpec:
    """One layer's receptive-field relationship: rf_in = alpha * rf_out + beta."""

    kind: str
    alpha: int
    beta: int

    def __post_init__(self):
        if self.alpha < 1 or self.beta < 0:
            raise ValueError(f"invalid receptive-field relationship: {self}")

    @classmethod
    def from_kernel_stride(cls, kind: str, kernel: int, stride: int) -> "LayerRfSpec":
        return cls(kind, alpha=stride, beta=kernel - stride)


def receptive_field(layers: list[LayerRfSpec]) -> list[int]:
    """Per-layer receptive-field sizes, composed back to front from a single
    output unit; entry i is the extent in layer i's input space."""
    if not layers:
        raise ValueError("layer list must be non-empty")
    sizes = []
    rf = 1
    for layer in reversed(layers):
        rf = layer.alpha * rf + layer.beta
        sizes.append(rf)
    return sizes[::-1]


def pyramid_overhead(levels: int) -> float:
    """Extra pixel cost of half-sampled pyramid levels beyond the base level:
    sum of 4^-k for k = 1..levels-1, approaching 1/3."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    return sum(4.0**-k for k in range(1, levels))


def resize_bilinear(image: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Resize a CHW image bilinearly with pixel-center alignment and edge
    clamping (used by the pyramid scan, not the gradient path)."""
    c, h, w = image.shape
    out_h, out_w = out_size
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_size}")
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    by = np.clip(ys - y0, 0.0, 1.0)[:, None]
    bx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = image[:, y0[:, None], x0[None, :]] * (1 - bx) + image[
        :, y0[:, None], x1[None, :]
    ] * bx
    bot = image[:, y1[:, None], x0[None, :]] * (1 - bx) + image[
        :, y1[:, None], x1[None, :]
    ] * bx
    return top * (1 - by) + bot * by


def downsample_image(image: np.ndarray) -> np.ndarray:
    """Half-sample a CHW image by 2x2 box averaging; odd extents replicate
    their last row/column so the output measures ceil(input / 2)."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (0, h % 2), (0, w % 2)), mode="edge")
    blocks = padded.reshape(c, padded.shape[1] // 2, 2, padded.shape[2] // 2, 2)
    return blocks.mean(axis=(2, 4))


@dataclass
class RoiPyramid:
    """Per-octave (downsampled image, mask) pairs for the masked RPN pass."""

    levels: list  # (octave_index, image CHW, RoiMask)

    @classmethod
    def build(
        cls,
        image: np.ndarray,
        groups: list[ScaleGroup],
        receptive_field_cap: int = DEFAULT_RF_CAP,
    ) -> "RoiPyramid":
        if image.ndim != 3:
            raise ValueError(f"expected CHW image, got {image.shape}")
        levels = []
        if not groups:
            return cls(levels)
        current = image
        depth = 0
        for group in sorted(groups, key=lambda g: g.octave_index):
            while depth < group.octave_index:
                current = downsample_image(current)
                depth += 1
            mask = build_mask(
                group.scaled_candidates(),
                (current.shape[1], current.shape[2]),
                receptive_field_cap,
            )
            levels.append((group.octave_index, current, mask))
        return cls(levels)

    def total_pixels(self) -> int:
        return sum(img.shape[1] * img.shape[2] for _, img, _ in self.levels)
