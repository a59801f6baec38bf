"""Landmark-driven alignment layer.

A closed-form two-parameter similarity fit maps detected landmarks onto a set
of canonical positions; the inverse map pulls a rectified crop out of the
source image by bilinear sampling. Both the fit and the sampling are
differentiable, so a classification loss on the rectified crop produces
gradients for the transform parameters, the detected landmarks, and the
canonical positions themselves (which makes the canonical layout learnable).

The transform is parameterized as

    [xr - mxr]   [ a  b] [x - mx]
    [yr - myr] = [-b  a] [y - my]

where (x, y) are source-image landmark coordinates, (xr, yr) rectified-image
coordinates, and (mx, my) / (mxr, myr) the centroids of the two point sets.
The least-squares solution is a = c1/c3, b = c2/c3 with

    c1 = sum(Xr*X + Yr*Y),  c2 = sum(Xr*Y - Yr*X),  c3 = sum(X^2 + Y^2)

over centered coordinates. A rectified point maps back to the source via

    x = ( a*(xr - mxr) - b*(yr - myr)) / (a^2 + b^2) + mx
    y = ( b*(xr - mxr) + a*(yr - myr)) / (a^2 + b^2) + my.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SingularTransformError(ValueError):
    """Landmarks are (near-)coincident; the similarity fit is degenerate."""


@dataclass(frozen=True)
class SimilarityTransform:
    a: float
    b: float
    m_x: float
    m_y: float
    m_xr: float
    m_yr: float

    @property
    def norm_sq(self) -> float:
        return self.a * self.a + self.b * self.b

    @property
    def source_scale(self) -> float:
        """Source-image pixels per rectified pixel."""
        return 1.0 / np.sqrt(self.norm_sq)

    @property
    def angle(self) -> float:
        """Rotation (radians) applied by the inverse map, source-from-rectified."""
        return float(np.arctan2(self.b, self.a))


@dataclass
class CanonicalShape:
    """Learnable target landmark layout in rectified-image pixel coordinates."""

    points: np.ndarray  # (N, 2) float64
    trainable: bool = True

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 2:
            raise ValueError(f"need at least 2 (x, y) points, got {self.points.shape}")

    def clamp(self, width: int, height: int, margin: int = 2) -> None:
        """Keep every point at least `margin` pixels inside the rectified image."""
        np.clip(self.points[:, 0], margin, width - 1 - margin, out=self.points[:, 0])
        np.clip(self.points[:, 1], margin, height - 1 - margin, out=self.points[:, 1])

    def copy(self) -> "CanonicalShape":
        return CanonicalShape(self.points.copy(), self.trainable)


@dataclass
class TransformGradients:
    """Loss gradients of the alignment layer; all finite, all zero when the
    upstream gradient is zero."""

    d_a: float
    d_b: float
    d_m_x: float
    d_m_y: float
    d_m_xr: float
    d_m_yr: float
    d_source: np.ndarray
    d_landmarks: np.ndarray | None = None
    d_canonical: np.ndarray | None = None


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (N, 2) points, got shape {pts.shape}")
    return pts


def estimate_similarity(landmarks, canonical) -> SimilarityTransform:
    """Closed-form least-squares similarity from landmarks to canonical points."""
    src = _as_points(landmarks)
    dst = _as_points(canonical.points if isinstance(canonical, CanonicalShape) else canonical)
    if src.shape != dst.shape:
        raise ValueError(f"point sets differ: {src.shape} vs {dst.shape}")
    if len(src) < 2:
        raise ValueError("need at least 2 landmark pairs")
    m_x, m_y = src.mean(axis=0)
    m_xr, m_yr = dst.mean(axis=0)
    X, Y = src[:, 0] - m_x, src[:, 1] - m_y
    Xr, Yr = dst[:, 0] - m_xr, dst[:, 1] - m_yr
    c1 = float(np.dot(Xr, X) + np.dot(Yr, Y))
    c2 = float(np.dot(Xr, Y) - np.dot(Yr, X))
    c3 = float(np.dot(X, X) + np.dot(Y, Y))
    spread_sq = max(1.0, float(np.max(src[:, 0] ** 2 + src[:, 1] ** 2)))
    if c3 <= 1e-12 * spread_sq:
        raise SingularTransformError(
            f"coincident landmarks (squared spread {c3:g})"
        )
    return SimilarityTransform(c1 / c3, c2 / c3, m_x, m_y, m_xr, m_yr)


def forward_map(t: SimilarityTransform, points) -> np.ndarray:
    """Source-image points -> rectified-image points."""
    pts = np.asarray(points, dtype=np.float64)
    x = pts[..., 0] - t.m_x
    y = pts[..., 1] - t.m_y
    return np.stack(
        [t.a * x + t.b * y + t.m_xr, -t.b * x + t.a * y + t.m_yr], axis=-1
    )


def inverse_map(t: SimilarityTransform, points) -> np.ndarray:
    """Rectified-image points -> source-image points."""
    pts = np.asarray(points, dtype=np.float64)
    d = t.norm_sq
    u = pts[..., 0] - t.m_xr
    v = pts[..., 1] - t.m_yr
    return np.stack(
        [
            (t.a * u - t.b * v) / d + t.m_x,
            (t.b * u + t.a * v) / d + t.m_y,
        ],
        axis=-1,
    )


def similarity_from_pose(
    scale: float, angle: float, src_center, dst_center
) -> SimilarityTransform:
    """Transform whose inverse map is: scale * rotate(angle) about dst_center,
    then translate to src_center. `scale` is source pixels per rectified pixel."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    return SimilarityTransform(
        a=float(np.cos(angle)) / scale,
        b=float(np.sin(angle)) / scale,
        m_x=float(src_center[0]),
        m_y=float(src_center[1]),
        m_xr=float(dst_center[0]),
        m_yr=float(dst_center[1]),
    )


def _bilinear_taps(source: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Tap values, weights and indices for bilinear sampling with zero padding.

    Returns (values[4] each (C, *), weights[4] each (*,), index arrays).
    Out-of-bounds taps contribute value 0 and receive no gradient.
    """
    _, h, w = source.shape
    xl = np.floor(xs)
    yt = np.floor(ys)
    bx = xs - xl
    by = ys - yt
    xl = xl.astype(np.intp)
    yt = yt.astype(np.intp)
    xr, yb = xl + 1, yt + 1

    weights = (
        (1.0 - bx) * (1.0 - by),  # top-left
        bx * (1.0 - by),          # top-right
        (1.0 - bx) * by,          # bottom-left
        bx * by,                  # bottom-right
    )
    coords = ((xl, yt), (xr, yt), (xl, yb), (xr, yb))
    values = []
    valids = []
    for cx, cy in coords:
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        cxc = np.clip(cx, 0, w - 1)
        cyc = np.clip(cy, 0, h - 1)
        vals = source[:, cyc, cxc] * valid
        values.append(vals)
        valids.append(valid)
    return values, weights, coords, valids, bx, by


def _rect_grid(out_h: int, out_w: int):
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp(source: np.ndarray, t: SimilarityTransform, out_size: tuple[int, int]) -> np.ndarray:
    """Rectify a CHW image: sample the source at the inverse map of every
    rectified grid point, bilinearly, with zero padding outside the image."""
    if source.ndim != 3:
        raise ValueError(f"expected CHW source, got shape {source.shape}")
    out_h, out_w = out_size
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_size}")
    gx, gy = _rect_grid(out_h, out_w)
    src_pts = inverse_map(t, np.stack([gx, gy], axis=-1))
    values, weights, _, _, _, _ = _bilinear_taps(
        source, src_pts[..., 0], src_pts[..., 1]
    )
    out = np.zeros((source.shape[0], out_h, out_w), dtype=np.float64)
    for val, wgt in zip(values, weights):
        out += val * wgt
    return out


def warp_backward(
    upstream: np.ndarray, source: np.ndarray, t: SimilarityTransform
) -> TransformGradients:
    """Backward pass of warp: gradients for (a, b), the four centroids, and
    the source pixels.

    The transform-parameter gradients chain the upstream signal through the
    horizontal/vertical image derivatives of the bilinear interpolant and the
    analytic derivatives of the inverse map. Landmark and canonical-point
    gradients are completed separately by landmark_and_canonical_gradients.
    """
    if upstream.ndim != 3 or source.ndim != 3 or upstream.shape[0] != source.shape[0]:
        raise ValueError(
            f"upstream {upstream.shape} incompatible with source {source.shape}"
        )
    out_h, out_w = upstream.shape[1], upstream.shape[2]
    gx, gy = _rect_grid(out_h, out_w)
    src_pts = inverse_map(t, np.stack([gx, gy], axis=-1))
    xs, ys = src_pts[..., 0], src_pts[..., 1]
    values, weights, coords, valids, bx, by = _bilinear_taps(source, xs, ys)
    v_tl, v_tr, v_bl, v_br = values

    # Image derivatives of the interpolant at the sample points.
    ix = by * (v_br - v_bl) + (1.0 - by) * (v_tr - v_tl)
    iy = bx * (v_br - v_tr) + (1.0 - bx) * (v_bl - v_tl)

    # Upstream folded through the image gradient, summed over channels.
    gx_img = (upstream * ix).sum(axis=0)
    gy_img = (upstream * iy).sum(axis=0)

    d = t.norm_sq
    u = gx - t.m_xr
    v = gy - t.m_yr
    x_off = (t.a * u - t.b * v) / d  # x - m_x
    y_off = (t.b * u + t.a * v) / d  # y - m_y

    dx_da = (u - 2.0 * t.a * x_off) / d
    dy_da = (v - 2.0 * t.a * y_off) / d
    dx_db = (-v - 2.0 * t.b * x_off) / d
    dy_db = (u - 2.0 * t.b * y_off) / d

    grads = TransformGradients(
        d_a=float((gx_img * dx_da + gy_img * dy_da).sum()),
        d_b=float((gx_img * dx_db + gy_img * dy_db).sum()),
        d_m_x=float(gx_img.sum()),
        d_m_y=float(gy_img.sum()),
        d_m_xr=float((gx_img * (-t.a / d) + gy_img * (-t.b / d)).sum()),
        d_m_yr=float((gx_img * (t.b / d) + gy_img * (-t.a / d)).sum()),
        d_source=np.zeros_like(source, dtype=np.float64),
    )
    for wgt, (cx, cy), valid in zip(weights, coords, valids):
        if not valid.any():
            continue
        contrib = upstream * (wgt * valid)
        cxc = np.clip(cx, 0, source.shape[2] - 1)
        cyc = np.clip(cy, 0, source.shape[1] - 1)
        for c in range(source.shape[0]):
            np.add.at(grads.d_source[c], (cyc, cxc), contrib[c])
    return grads


def landmark_and_canonical_gradients(
    grads: TransformGradients, landmarks, canonical
) -> TransformGradients:
    """Complete a TransformGradients with landmark and canonical-point terms.

    Chains the (a, b) and centroid gradients through the closed-form
    least-squares solution; must be called with the same point sets the
    transform was estimated from.
    """
    src = _as_points(landmarks)
    dst = _as_points(canonical.points if isinstance(canonical, CanonicalShape) else canonical)
    n = len(src)
    m_x, m_y = src.mean(axis=0)
    m_xr, m_yr = dst.mean(axis=0)
    X, Y = src[:, 0] - m_x, src[:, 1] - m_y
    Xr, Yr = dst[:, 0] - m_xr, dst[:, 1] - m_yr
    c1 = float(np.dot(Xr, X) + np.dot(Yr, Y))
    c2 = float(np.dot(Xr, Y) - np.dot(Yr, X))
    c3 = float(np.dot(X, X) + np.dot(Y, Y))
    spread_sq = max(1.0, float(np.max(src[:, 0] ** 2 + src[:, 1] ** 2)))
    if c3 <= 1e-12 * spread_sq:
        raise SingularTransformError(
            f"coincident landmarks (squared spread {c3:g})"
        )
    c3sq = c3 * c3

    # Partials of a = c1/c3 and b = c2/c3; centering makes the centroid terms
    # of dc1/dc2 vanish, leaving the centered coordinates themselves.
    da_dx = (Xr * c3 - c1 * 2.0 * X) / c3sq
    da_dy = (Yr * c3 - c1 * 2.0 * Y) / c3sq
    db_dx = (-Yr * c3 - c2 * 2.0 * X) / c3sq
    db_dy = (Xr * c3 - c2 * 2.0 * Y) / c3sq
    da_dxr = X / c3
    da_dyr = Y / c3
    db_dxr = Y / c3
    db_dyr = -X / c3

    d_landmarks = np.empty((n, 2), dtype=np.float64)
    d_landmarks[:, 0] = grads.d_a * da_dx + grads.d_b * db_dx + grads.d_m_x / n
    d_landmarks[:, 1] = grads.d_a * da_dy + grads.d_b * db_dy + grads.d_m_y / n
    d_canonical = np.empty((n, 2), dtype=np.float64)
    d_canonical[:, 0] = grads.d_a * da_dxr + grads.d_b * db_dxr + grads.d_m_xr / n
    d_canonical[:, 1] = grads.d_a * da_dyr + grads.d_b * db_dyr + grads.d_m_yr / n

    grads.d_landmarks = d_landmarks
    grads.d_canonical = d_canonical
    return grads
