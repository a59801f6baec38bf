"""Boosted-fern cascade pre-filter.

A fern is a depth-8 stack of pixel-difference tests on a 32x32 grayscale
patch; its 8 bits index one of 256 partitions, each carrying a half-log-odds
score. Ferns are trained stagewise with RealBoost, every fern gets a soft
rejection threshold, and a sliding-window scan over an image pyramid turns
the cascade into a candidate generator.

All weight reductions go through an adjacent-pair folding sum. Folding halves
exactly commute with scaling by powers of two in IEEE arithmetic, so a
training set with every sample duplicated in place produces bit-identical
partition sums after weight normalization, and therefore a bit-identical
model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .suppress import Detection

PATCH_SIZE = 32
NUM_SPLITS = 8
NUM_PARTITIONS = 1 << NUM_SPLITS


class TrainingError(RuntimeError):
    pass


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luma for (3, H, W) color input, integer-rounded when the
    input is an integer type; single-channel input passes through as 2-D."""
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0]
    if image.ndim == 3 and image.shape[0] == 3:
        luma = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
        if np.issubdtype(image.dtype, np.integer):
            return np.rint(luma).astype(image.dtype)
        return luma
    raise ValueError(f"expected (H, W), (1, H, W) or (3, H, W), got {image.shape}")


def fold_sum(values: np.ndarray) -> float:
    """Adjacent-pair folding sum (pad to a power of two, halve repeatedly).

    Unlike a sequential sum, fold_sum([a, a, b, b, ...]) is exactly twice
    fold_sum([a, b, ...]), which the duplicated-training-set invariance of
    cascade training relies on.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    size = 1 << int(np.ceil(np.log2(v.size)))
    if size != v.size:
        v = np.concatenate([v, np.zeros(size - v.size)])
    else:
        v = v.copy()
    while v.size > 1:
        v = v[0::2] + v[1::2]
    return float(v[0])


def _bucket_fold_sums(partitions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-partition folding sums of weights, order-preserving within each
    partition. Returns an array of NUM_PARTITIONS sums."""
    if partitions.size == 0:
        return np.zeros(NUM_PARTITIONS)
    order = np.argsort(partitions, kind="stable")
    sorted_parts = partitions[order]
    counts = np.bincount(sorted_parts, minlength=NUM_PARTITIONS)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    ranks = np.arange(partitions.size) - offsets[sorted_parts]
    width = 1 << max(0, int(np.ceil(np.log2(max(1, counts.max())))))
    mat = np.zeros((NUM_PARTITIONS, width))
    mat[sorted_parts, ranks] = weights[order]
    while mat.shape[1] > 1:
        mat = mat[:, 0::2] + mat[:, 1::2]
    return mat[:, 0]


@dataclass
class Fern:
    """Eight pixel-difference splits plus one score per bit partition."""

    coords: np.ndarray      # (8, 4) int: x1, y1, x2, y2 in patch coordinates
    thresholds: np.ndarray  # (8,) float
    scores: np.ndarray      # (256,) float

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64)
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.coords.shape != (NUM_SPLITS, 4):
            raise ValueError(f"coords must be (8, 4), got {self.coords.shape}")
        if self.thresholds.shape != (NUM_SPLITS,):
            raise ValueError(f"thresholds must be (8,), got {self.thresholds.shape}")
        if self.scores.shape != (NUM_PARTITIONS,):
            raise ValueError(f"scores must be (256,), got {self.scores.shape}")

    def validate_coords(self, patch_size: int) -> None:
        if self.coords.min() < 0 or self.coords.max() >= patch_size:
            raise ValueError(
                f"split coordinates outside [0, {patch_size}): "
                f"{self.coords.min()}..{self.coords.max()}"
            )


def fern_index(patch: np.ndarray, fern: Fern) -> int:
    """Partition index of one patch: bit i is set when
    p(x1_i, y1_i) - p(x2_i, y2_i) < threshold_i."""
    x1, y1, x2, y2 = fern.coords.T
    bits = (patch[y1, x1] - patch[y2, x2]) < fern.thresholds
    return int(bits @ (1 << np.arange(NUM_SPLITS)))


def _indices_flat(patches_flat: np.ndarray, fern: Fern, patch_size: int) -> np.ndarray:
    """Partition indices for (B, patch_size*patch_size) flattened patches."""
    x1, y1, x2, y2 = fern.coords.T
    diffs = patches_flat[:, y1 * patch_size + x1] - patches_flat[:, y2 * patch_size + x2]
    bits = diffs < fern.thresholds
    return bits @ (1 << np.arange(NUM_SPLITS))


def partition_scores(
    partitions: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    smoothing_fraction: float = 1e-4,
) -> np.ndarray:
    """Half-log-odds score per partition: 0.5*log(sum of positive weights /
    sum of negative weights), both sums Laplace-smoothed by a fixed fraction
    of the total weight so empty partitions score exactly zero."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    pos = _bucket_fold_sums(partitions[labels == 1], weights[labels == 1])
    neg = _bucket_fold_sums(partitions[labels == 0], weights[labels == 0])
    eps = smoothing_fraction * fold_sum(weights)
    return 0.5 * np.log((pos + eps) / (neg + eps))


@dataclass
class CascadeModel:
    """Ordered ferns with one soft rejection threshold per fern."""

    ferns: list[Fern]
    stage_thresholds: np.ndarray
    patch_size: int = PATCH_SIZE
    train_log: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stage_thresholds = np.asarray(self.stage_thresholds, dtype=np.float64)
        if len(self.stage_thresholds) != len(self.ferns):
            raise ValueError("one stage threshold per fern required")
        for fern in self.ferns:
            fern.validate_coords(self.patch_size)


@dataclass
class CascadeConfig:
    """Training knobs; the full-scale default is 1000 ferns with a 99.9%
    per-stage detection target, desk-scale runs use fewer ferns at 99%."""

    num_ferns: int = 1000
    splits_per_fern: int = NUM_SPLITS
    candidate_pool: int = 200
    per_stage_detection_target: float = 0.99
    patch_size: int = PATCH_SIZE
    smoothing_fraction: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.splits_per_fern != NUM_SPLITS:
            raise ValueError("ferns are fixed at 8 splits")
        if not 0.0 < self.per_stage_detection_target <= 1.0:
            raise ValueError("detection target must be in (0, 1]")


def _draw_candidate(rng, patches_flat, patch_size):
    """One random fern candidate: uniform coordinates, thresholds drawn from
    the empirical pixel-difference distribution's quantiles (inverted CDF, so
    the draw only depends on the difference multiset's distribution)."""
    coords = rng.integers(0, patch_size, size=(NUM_SPLITS, 4))
    x1, y1, x2, y2 = coords.T
    diffs = (
        patches_flat[:, y1 * patch_size + x1] - patches_flat[:, y2 * patch_size + x2]
    )
    qs = rng.uniform(0.05, 0.95, size=NUM_SPLITS)
    thresholds = np.array(
        [
            np.quantile(diffs[:, i], qs[i], method="inverted_cdf")
            for i in range(NUM_SPLITS)
        ],
        dtype=np.float64,
    )
    return coords, thresholds


def train_cascade(
    positives: np.ndarray, negatives: np.ndarray, config: CascadeConfig
) -> CascadeModel:
    """Greedy stagewise RealBoost over random fern candidates.

    Per stage: draw a candidate pool, keep the fern minimizing the
    Bhattacharyya-style error sum(2*sqrt(W+ * W-)) over partitions, set its
    partition scores, reweight with exp(-y*f) and renormalize, then calibrate
    the stage threshold so at least the target fraction of training positives
    keeps a cumulative score above it.
    """
    ps = config.patch_size
    if positives.ndim != 3 or negatives.ndim != 3:
        raise ValueError("expected stacks of 2-D grayscale patches")
    if len(positives) == 0 or len(negatives) == 0:
        raise ValueError("both classes must be non-empty")
    if positives.shape[1:] != (ps, ps) or negatives.shape[1:] != (ps, ps):
        raise ValueError(f"patches must be {ps}x{ps}")

    rng = np.random.default_rng(config.seed)
    patches = np.concatenate([positives, negatives]).astype(np.float64)
    flat = patches.reshape(len(patches), -1)
    labels = np.concatenate(
        [np.ones(len(positives), dtype=np.int64), np.zeros(len(negatives), dtype=np.int64)]
    )
    signs = np.where(labels == 1, 1.0, -1.0)
    n = len(patches)
    weights = np.full(n, 1.0 / n)

    ferns: list[Fern] = []
    thresholds = np.empty(config.num_ferns)
    cumulative = np.zeros(n)
    stage_losses = []
    n_pos = len(positives)
    allowed_rejects = int(np.floor((1.0 - config.per_stage_detection_target) * n_pos))

    for stage in range(config.num_ferns):
        best = None
        for _ in range(config.candidate_pool):
            coords, threshs = _draw_candidate(rng, flat, ps)
            cand = Fern(coords, threshs, np.zeros(NUM_PARTITIONS))
            parts = _indices_flat(flat, cand, ps)
            pos_sums = _bucket_fold_sums(parts[labels == 1], weights[labels == 1])
            neg_sums = _bucket_fold_sums(parts[labels == 0], weights[labels == 0])
            error = fold_sum(2.0 * np.sqrt(pos_sums * neg_sums))
            occupied = int(np.count_nonzero(pos_sums + neg_sums))
            if best is None or error < best[0]:
                best = (error, cand, parts, occupied)
        error, fern, parts, occupied = best
        if occupied <= 1:
            raise TrainingError(
                f"degenerate fern pool at stage {stage}: best candidate keeps "
                "all samples in one partition"
            )
        fern.scores = partition_scores(
            parts, labels, weights, config.smoothing_fraction
        )
        ferns.append(fern)

        sample_scores = fern.scores[parts]
        weights = weights * np.exp(-signs * sample_scores)
        total = fold_sum(weights)
        stage_losses.append(total)
        weights = weights / total

        cumulative = cumulative + sample_scores
        pos_sorted = np.sort(cumulative[labels == 1])
        thresholds[stage] = pos_sorted[min(allowed_rejects, n_pos - 1)]

    return CascadeModel(
        ferns,
        thresholds,
        patch_size=ps,
        train_log={"stage_partition_losses": stage_losses},
    )


def cascade_score(
    patch: np.ndarray,
    model: CascadeModel,
    threshold_offset: float = 0.0,
    early_exit: bool = True,
):
    """Cumulative fern score with soft-cascade early exit.

    Returns (score, rejected_at_stage) where rejected_at_stage is None for an
    accepted patch. With early_exit disabled the full chain is evaluated and
    the decision is derived from the same thresholds afterwards.
    """
    if patch.shape != (model.patch_size, model.patch_size):
        raise ValueError(
            f"patch must be {model.patch_size}x{model.patch_size}, got {patch.shape}"
        )
    score = 0.0
    rejected_at = None
    for stage, fern in enumerate(model.ferns):
        score += fern.scores[fern_index(patch, fern)]
        if score < model.stage_thresholds[stage] + threshold_offset:
            if early_exit:
                return score, stage
            if rejected_at is None:
                rejected_at = stage
    return score, rejected_at


def _scan_level(gray_flat, level_w, wins_x, wins_y, model, stride, offset):
    """Vectorized soft-cascade evaluation of all windows at one pyramid level.
    Returns (alive window flat-positions, their cumulative scores)."""
    wy, wx = np.divmod(np.arange(wins_y * wins_x), wins_x)
    wy = wy * stride
    wx = wx * stride
    scores = np.zeros(wy.size)
    alive = np.arange(wy.size)
    for stage, fern in enumerate(model.ferns):
        if alive.size == 0:
            break
        x1, y1, x2, y2 = fern.coords.T
        base = wy[alive, None] * level_w + wx[alive, None]
        diffs = (
            gray_flat[base + (y1 * level_w + x1)]
            - gray_flat[base + (y2 * level_w + x2)]
        )
        bits = diffs < fern.thresholds
        parts = bits @ (1 << np.arange(NUM_SPLITS))
        scores[alive] += fern.scores[parts]
        keep = scores[alive] >= model.stage_thresholds[stage] + offset
        alive = alive[keep]
    return alive, scores[alive]


def scan(
    image: np.ndarray,
    model: CascadeModel,
    scale_step: float = 2.0 ** (1.0 / 3.0),
    window_stride: int = 4,
    threshold_offset: float = 0.0,
    min_face: int = 36,
) -> list[Detection]:
    """Slide the cascade over an image pyramid and emit accepted windows.

    Pyramid levels shrink by scale_step starting from the level where the
    32-pixel window covers a min_face-sized face; boxes map back to original
    coordinates carrying the cumulative cascade score.
    """
    from .roiconv import resize_bilinear

    gray = to_grayscale(image).astype(np.float64)
    h, w = gray.shape
    ps = model.patch_size
    detections: list[Detection] = []
    factor = ps / float(min_face)
    while True:
        lh, lw = int(round(h * factor)), int(round(w * factor))
        if lh < ps or lw < ps:
            break
        level = resize_bilinear(gray[None], (lh, lw))[0]
        wins_y = (lh - ps) // window_stride + 1
        wins_x = (lw - ps) // window_stride + 1
        alive, scores = _scan_level(
            level.ravel(), lw, wins_x, wins_y, model, window_stride, threshold_offset
        )
        for flat_pos, score in zip(alive, scores):
            wy, wx = divmod(int(flat_pos), wins_x)
            detections.append(
                Detection(
                    box=(
                        wx * window_stride / factor,
                        wy * window_stride / factor,
                        ps / factor,
                        ps / factor,
                    ),
                    score=float(score),
                )
            )
        factor /= scale_step
    return detections
