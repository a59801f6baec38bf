"""Minimal deterministic CNN kernel: im2col convolution, pooling, dense and
softmax layers, all with hand-written backward passes.

Conventions used throughout the package:

- images and feature maps are numpy arrays in CHW layout (channels, rows,
  cols), row-major, float64 unless the caller opts into float32;
- a point is (x, y) = (column, row);
- all operations are pure functions over their inputs and are deterministic
  in a single-threaded run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives incompatibly shaped arrays."""


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a square-kernel 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid conv spec: {self}")

    def out_size(self, height: int, width: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        oh = (height + 2 * p - k) // s + 1
        ow = (width + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"{height}x{width} input too small for kernel {k}, "
                f"stride {s}, padding {p}"
            )
        return oh, ow


def _patch_indices(spec: ConvSpec, out_h: int, out_w: int):
    """Index arrays mapping (out position, patch element) into the padded input.

    Returns (chan, row, col), each shaped (C*K*K,) x (out_h*out_w,) compatible,
    so that padded[chan, row, col] has shape (C*K*K, out_h*out_w).
    """
    c, k, s = spec.in_channels, spec.kernel, spec.stride
    chan = np.repeat(np.arange(c), k * k).reshape(-1, 1)
    ky = np.tile(np.repeat(np.arange(k), k), c).reshape(-1, 1)
    kx = np.tile(np.tile(np.arange(k), k), c).reshape(-1, 1)
    oy = s * np.repeat(np.arange(out_h), out_w).reshape(1, -1)
    ox = s * np.tile(np.arange(out_w), out_h).reshape(1, -1)
    return chan, ky + oy, kx + ox


def _pad_chw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def _check_input(x: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 3:
        raise ShapeError(f"expected CHW input, got shape {x.shape}")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(
            f"input has {x.shape[0]} channels, spec expects {spec.in_channels}"
        )


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gather every stride-aligned KxK patch of a CHW input into a matrix.

    Row r of the result is the flattened (channel-major, then row, then col)
    receptive patch of output position r, positions enumerated row-major.
    Output shape is (out_h*out_w, C*K*K).
    """
    _check_input(x, spec)
    out_h, out_w = spec.out_size(x.shape[1], x.shape[2])
    padded = _pad_chw(x, spec.padding)
    chan, row, col = _patch_indices(spec, out_h, out_w)
    return padded[chan, row, col].T.copy()


def _filters_matrix(filters: np.ndarray, spec: ConvSpec) -> np.ndarray:
    expected = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if filters.shape != expected:
        raise ShapeError(f"filters shape {filters.shape}, expected {expected}")
    return filters.reshape(spec.out_channels, -1)


def conv2d_forward(
    x: np.ndarray,
    filters: np.ndarray,
    spec: ConvSpec,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Convolve a CHW input with (N, C, K, K) filters via im2col + matmul."""
    fmat = _filters_matrix(filters, spec)
    out_h, out_w = spec.out_size(x.shape[1], x.shape[2])
    cols = im2col(x, spec)
    out = cols @ fmat.T
    if bias is not None:
        out += bias
    return out.T.reshape(spec.out_channels, out_h, out_w)


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    filters: np.ndarray,
    spec: ConvSpec,
    with_bias: bool = False,
):
    """Gradients of a scalar loss through conv2d_forward.

    Returns (grad_input, grad_filters) or (grad_input, grad_filters,
    grad_bias) when with_bias is set.
    """
    _check_input(x, spec)
    fmat = _filters_matrix(filters, spec)
    out_h, out_w = spec.out_size(x.shape[1], x.shape[2])
    if grad_out.shape != (spec.out_channels, out_h, out_w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape}, expected "
            f"{(spec.out_channels, out_h, out_w)}"
        )
    gmat = grad_out.reshape(spec.out_channels, -1)  # (N, P)
    cols = im2col(x, spec)  # (P, CK2)
    grad_filters = (gmat @ cols).reshape(filters.shape)
    grad_cols = gmat.T @ fmat  # (P, CK2)

    p = spec.padding
    padded_shape = (x.shape[0], x.shape[1] + 2 * p, x.shape[2] + 2 * p)
    grad_padded = np.zeros(padded_shape, dtype=x.dtype)
    chan, row, col = _patch_indices(spec, out_h, out_w)
    np.add.at(grad_padded, (chan, row, col), grad_cols.T)
    grad_input = (
        grad_padded[:, p : p + x.shape[1], p : p + x.shape[2]] if p else grad_padded
    )
    if with_bias:
        return grad_input, grad_filters, gmat.sum(axis=1)
    return grad_input, grad_filters


def _pad_to_even(x: np.ndarray) -> np.ndarray:
    """Edge-replicate the last row/column so both spatial extents are even."""
    _, h, w = x.shape
    if h % 2 == 0 and w % 2 == 0:
        return x
    return np.pad(x, ((0, 0), (0, h % 2), (0, w % 2)), mode="edge")


def maxpool2x2(x: np.ndarray):
    """2x2 stride-2 max pooling of a CHW array.

    Odd extents are edge-replicated first. Returns (output, argmax) where
    argmax holds, per output cell, the index 0..3 of the block maximum in
    row-major block order (ties resolve to the first index, so a replicated
    edge cell never wins over its source).
    """
    if x.ndim != 3:
        raise ShapeError(f"expected CHW input, got shape {x.shape}")
    xp = _pad_to_even(x)
    c, h, w = xp.shape
    blocks = xp.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(c, h // 2, w // 2, 4)
    argmax = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, argmax[..., None], axis=3)[..., 0]
    return out, argmax


def maxpool2x2_backward(
    grad_out: np.ndarray, argmax: np.ndarray, in_shape: tuple[int, int, int]
) -> np.ndarray:
    """Route pooled gradients back to each block's argmax position."""
    c, h, w = in_shape
    he, we = h + h % 2, w + w % 2
    grad = np.zeros((c, he // 2, we // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(grad, argmax[..., None], grad_out[..., None], axis=3)
    grad = grad.reshape(c, he // 2, we // 2, 2, 2).transpose(0, 1, 3, 2, 4)
    return grad.reshape(c, he, we)[:, :h, :w]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map weight @ x + bias for a flat input vector."""
    if x.ndim != 1 or weight.shape[1] != x.shape[0] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(
            f"fc shapes incompatible: x {x.shape}, W {weight.shape}, b {bias.shape}"
        )
    return weight @ x + bias


def fully_connected_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Returns (grad_x, grad_weight, grad_bias)."""
    return weight.T @ grad_out, np.outer(grad_out, x), grad_out.copy()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(
    logits: np.ndarray, labels, weights: np.ndarray | None = None
):
    """Softmax cross-entropy over the last axis.

    logits: (K,) with an int label, or (B, K) with (B,) int labels.
    weights: optional per-row weights; without them rows are averaged.
    Returns (loss, probs); pair with softmax_cross_entropy_backward.
    """
    logits = np.asarray(logits)
    if logits.shape[-1] == 0:
        raise ShapeError("softmax over an empty class axis")
    single = logits.ndim == 1
    lm = logits.reshape(1, -1) if single else logits
    labs = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labs.shape[0] != lm.shape[0]:
        raise ShapeError(f"{labs.shape[0]} labels for {lm.shape[0]} rows")
    logp = log_softmax(lm)
    probs = np.exp(logp)
    per_row = -logp[np.arange(lm.shape[0]), labs]
    if weights is None:
        loss = per_row.mean()
    else:
        loss = float(np.dot(per_row, weights))
    return loss, (probs[0] if single else probs)


def softmax_cross_entropy_backward(
    probs: np.ndarray, labels, weights: np.ndarray | None = None
) -> np.ndarray:
    """Gradient of softmax_cross_entropy's loss with respect to the logits."""
    single = probs.ndim == 1
    pm = probs.reshape(1, -1).copy() if single else probs.copy()
    labs = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    pm[np.arange(pm.shape[0]), labs] -= 1.0
    if weights is None:
        pm /= pm.shape[0]
    else:
        pm *= np.asarray(weights).reshape(-1, 1)
    return pm[0] if single else pm


def concat_features(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate two flat feature vectors."""
    return np.concatenate([np.ravel(a), np.ravel(b)])


def concat_features_backward(grad_out: np.ndarray, len_a: int):
    """Split the concatenated gradient back into its two parts."""
    return grad_out[:len_a].copy(), grad_out[len_a:].copy()


def uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                 dtype=np.float64) -> np.ndarray:
    """Seeded uniform init on [-s, s] with s = sqrt(6 / (fan_in + fan_out))."""
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(dtype)


def sgd_step(params, grads, velocities, learning_rate: float, momentum: float):
    """One in-place SGD update with classical momentum.

    v <- momentum * v + g;  p <- p - learning_rate * v.
    Rejects non-finite gradients instead of silently corrupting parameters.
    """
    if len(params) != len(grads) or len(params) != len(velocities):
        raise ShapeError("params, grads and velocities must align")
    for i, (p, g, v) in enumerate(zip(params, grads, velocities)):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(
                f"entry {i}: param {p.shape}, grad {g.shape}, velocity {v.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient in entry {i} (max abs "
                f"{np.max(np.abs(g[np.isfinite(g)]), initial=0.0):g})"
            )
        v *= momentum
        v += g
        p -= learning_rate * v
    return params


class SgdOptimizer:
    """Holds per-parameter velocity state for sgd_step."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocities: dict[int, np.ndarray] = {}

    def step(self, params, grads) -> None:
        vels = []
        for i, p in enumerate(params):
            if i not in self._velocities:
                self._velocities[i] = np.zeros_like(p)
            vels.append(self._velocities[i])
        sgd_step(params, grads, vels, self.learning_rate, self.momentum)


@dataclass
class MultiTaskLoss:
    """Joint proposal-stage objective: face/non-face cross-entropy plus a
    landmark regression term in box-normalized [0, 1] coordinates."""

    classification: float
    landmark: float
    lam: float = 1.0

    @property
    def total(self) -> float:
        return self.classification + self.lam * self.landmark
