"""End-to-end two-stage detector over the synthetic corpus.

Stage one is a proposal net: a small convolution trunk (stride 8, receptive
field 85) with a per-cell face score and a per-cell five-landmark regression.
Stage two warps each surviving candidate to a canonical 64x64 pose using the
closed-form similarity fit, runs a small verification net on the crop, and
arbitrates face/non-face over the concatenated proposal + verification
features. Joint training backpropagates the verdict loss through the warp
into the predicted landmarks and the canonical positions.

Inference can run the proposal trunk densely over an image pyramid, or only
inside ROI masks built from a boosted-fern pre-filter's candidates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .align import (
    CanonicalShape,
    SingularTransformError,
    estimate_similarity,
    landmark_and_canonical_gradients,
    similarity_from_pose,
    warp,
    warp_backward,
)
from .ferns import CascadeConfig, to_grayscale, train_cascade
from .ferns import scan as cascade_scan
from .model import ConvLayer, DetectorModel, FcLayer, RcnnNet, RpnNet
from .nn import ConvSpec, MultiTaskLoss, SgdOptimizer
from .roiconv import (
    RoiMask,
    RoiPyramid,
    downsample_image,
    downsample_mask,
    group_candidates,
    roi_conv_forward,
)
from .suppress import Detection, SuppressionConfig, iou, nms, non_top_k
from .synthetic import GLYPH_LANDMARKS, box_from_landmarks

CELL_STRIDE = 8
CELL_OFFSET = 3.0


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    rpn_channels: tuple[int, int, int] = (8, 12, 16)
    rcnn_channels: tuple[int, int] = (8, 16)
    rcnn_feature: int = 48
    rect_size: int = 64
    point_scale: float = 48.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    canonical_lr_scale: float = 2.0
    # weight of the verdict loss's gradient on the predicted landmarks; the
    # raw chain is orders of magnitude stronger than the landmark MSE term
    # and would swamp the shared trunk at desk scale
    warp_supervision_scale: float = 0.02
    # weight of the verdict loss's gradient on the proposal feature column;
    # damps the multi-task tug-of-war that otherwise erodes landmark accuracy
    concat_supervision_scale: float = 0.1
    epochs: int = 3
    lambda_landmark: float = 3.0
    pos_radius: float = 0.15
    ignore_radius: float = 0.55
    samples_per_image: int = 2  # positives and negatives each, per image
    seed: int = 0

    def default_canonical(self) -> np.ndarray:
        center = (self.rect_size - 1) / 2.0
        return center + 0.68 * self.rect_size * GLYPH_LANDMARKS


@dataclass
class DetectOptions:
    use_roi_conv: bool = False
    suppression: str = "non_top_k"  # non_top_k | nms | none
    k: int = 3
    iou_threshold: float = 0.5
    proposal_threshold: float = 0.5
    prefilter_offset: float = 0.0
    verdict_threshold: float = 0.0
    max_levels: int = 4
    final_nms: bool = True


def build_detector(config: TrainConfig, multitask: bool = True,
                   use_concat: bool = True, supervised_transform: bool = True,
                   canonical_init: np.ndarray | None = None) -> DetectorModel:
    """Randomly initialized detector; ablation switches select the variant."""
    rng = np.random.default_rng(config.seed)
    f1, f2, f3 = config.rpn_channels
    r1, r2 = config.rcnn_channels
    point_out = 10 if multitask else 3
    rpn = RpnNet(
        conv1=ConvLayer.create(rng, ConvSpec(1, f1, 7, stride=2, padding=3)),
        conv2=ConvLayer.create(rng, ConvSpec(f1, f2, 7, stride=1, padding=3)),
        conv3=ConvLayer.create(rng, ConvSpec(f2, f3, 7, stride=1, padding=3)),
        score_head=ConvLayer.create(rng, ConvSpec(f3, 2, 1)),
        point_head=ConvLayer.create(rng, ConvSpec(f3, point_out, 1)),
    )
    grid = config.rect_size // 8
    rcnn = RcnnNet(
        conv1=ConvLayer.create(rng, ConvSpec(1, r1, 5, stride=2, padding=2)),
        conv2=ConvLayer.create(rng, ConvSpec(r1, r2, 3, stride=1, padding=1)),
        fc=FcLayer.create(rng, r2 * grid * grid, config.rcnn_feature),
    )
    verdict_in = config.rcnn_feature + (f3 if use_concat else 0)
    verdict = FcLayer.create(rng, verdict_in, 2)
    canonical = CanonicalShape(
        config.default_canonical() if canonical_init is None else np.array(canonical_init),
        trainable=supervised_transform,
    )
    model = DetectorModel(
        rpn=rpn,
        rcnn=rcnn,
        verdict=verdict,
        canonical=canonical,
        multitask=multitask,
        use_concat=use_concat,
        rect_size=config.rect_size,
        point_scale=config.point_scale,
    )
    model.extras["supervised_transform"] = supervised_transform
    return model


# --------------------------------------------------------------------------
# proposal net forward/backward


@dataclass
class RpnState:
    image: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    p1: np.ndarray
    idx1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    p2: np.ndarray
    idx2: np.ndarray
    z3: np.ndarray
    feat: np.ndarray
    score: np.ndarray
    point: np.ndarray
    head_mask: RoiMask | None = None


def _conv(layer: ConvLayer, x, mask=None):
    if mask is None:
        return nn.conv2d_forward(x, layer.filters, layer.spec, bias=layer.bias)
    return roi_conv_forward(x, layer.filters, mask, layer.spec, bias=layer.bias)


def rpn_forward(rpn: RpnNet, image: np.ndarray, mask: RoiMask | None = None) -> RpnState:
    """Run the proposal trunk densely, or inside an input-resolution ROI mask
    whose halvings track each stride-2 stage."""
    m1 = mp1 = mp2 = None
    if mask is not None:
        m1 = downsample_mask(mask)        # conv1 output (stride 2)
        mp1 = downsample_mask(m1)         # after pool 1
        mp2 = downsample_mask(mp1)        # after pool 2
    z1 = _conv(rpn.conv1, image, m1)
    a1 = nn.relu(z1)
    p1, idx1 = nn.maxpool2x2(a1)
    if mp1 is not None:
        p1 = p1 * mp1.bits
    z2 = _conv(rpn.conv2, p1, mp1)
    a2 = nn.relu(z2)
    p2, idx2 = nn.maxpool2x2(a2)
    if mp2 is not None:
        p2 = p2 * mp2.bits
    z3 = _conv(rpn.conv3, p2, mp2)
    feat = nn.relu(z3)
    score = _conv(rpn.score_head, feat, mp2)
    point = _conv(rpn.point_head, feat, mp2)
    return RpnState(image, z1, a1, p1, idx1, z2, a2, p2, idx2, z3, feat,
                    score, point, head_mask=mp2)


def rpn_backward(rpn: RpnNet, state: RpnState, d_score, d_point, d_feat_extra=None):
    """Gradients for every proposal-net parameter (dense path only)."""
    d_feat, d_ws, d_bs = nn.conv2d_backward(
        d_score, state.feat, rpn.score_head.filters, rpn.score_head.spec, with_bias=True
    )
    d_feat_p, d_wp, d_bp = nn.conv2d_backward(
        d_point, state.feat, rpn.point_head.filters, rpn.point_head.spec, with_bias=True
    )
    d_feat = d_feat + d_feat_p
    if d_feat_extra is not None:
        d_feat = d_feat + d_feat_extra
    d_z3 = nn.relu_backward(d_feat, state.z3)
    d_p2, d_w3, d_b3 = nn.conv2d_backward(
        d_z3, state.p2, rpn.conv3.filters, rpn.conv3.spec, with_bias=True
    )
    d_a2 = nn.maxpool2x2_backward(d_p2, state.idx2, state.a2.shape)
    d_z2 = nn.relu_backward(d_a2, state.z2)
    d_p1, d_w2, d_b2 = nn.conv2d_backward(
        d_z2, state.p1, rpn.conv2.filters, rpn.conv2.spec, with_bias=True
    )
    d_a1 = nn.maxpool2x2_backward(d_p1, state.idx1, state.a1.shape)
    d_z1 = nn.relu_backward(d_a1, state.z1)
    _, d_w1, d_b1 = nn.conv2d_backward(
        d_z1, state.image, rpn.conv1.filters, rpn.conv1.spec, with_bias=True
    )
    return [d_w1, d_b1, d_w2, d_b2, d_w3, d_b3, d_ws, d_bs, d_wp, d_bp]


def cell_centers(cells_h: int, cells_w: int):
    """Input-space (x, y) centers of the proposal grid cells."""
    xs = CELL_OFFSET + CELL_STRIDE * np.arange(cells_w)
    ys = CELL_OFFSET + CELL_STRIDE * np.arange(cells_h)
    return xs, ys


# --------------------------------------------------------------------------
# targets and proposal losses


@dataclass
class RpnTargets:
    labels: np.ndarray        # (Hc, Wc) in {1 pos, 0 neg, -1 ignore}
    cls_weights: np.ndarray   # (Hc, Wc), sums to 1
    reg_targets: np.ndarray   # (R, Hc, Wc) regression targets where positive
    face_size: np.ndarray     # (Hc, Wc) matched face size for normalization


def rpn_targets(faces, cells_h, cells_w, config: TrainConfig,
                multitask: bool = True) -> RpnTargets:
    xs, ys = cell_centers(cells_h, cells_w)
    cx_grid, cy_grid = np.meshgrid(xs, ys)
    labels = np.zeros((cells_h, cells_w), dtype=np.int64)
    reg_dim = 10 if multitask else 3
    reg = np.zeros((reg_dim, cells_h, cells_w))
    sizes = np.full((cells_h, cells_w), config.point_scale)

    for box, lms in faces:
        bx, by, bw, bh = box
        fcx, fcy = bx + bw / 2.0, by + bh / 2.0
        size = max(bw, bh)
        dist = np.hypot(cx_grid - fcx, cy_grid - fcy)
        ignore = dist <= config.ignore_radius * size
        pos = dist <= config.pos_radius * size
        nearest = np.unravel_index(np.argmin(dist), dist.shape)
        pos[nearest] = True
        labels[ignore & (labels == 0)] = -1
        labels[pos] = 1
        sel = pos
        sizes[sel] = size
        if multitask:
            centers = np.stack([cx_grid[sel], cy_grid[sel]], axis=1)
            offs = lms.reshape(-1)[None, :] - np.tile(centers, (1, 5))
            reg[:, sel] = (offs / config.point_scale).T
        else:
            reg[0, sel] = (fcx - cx_grid[sel]) / config.point_scale
            reg[1, sel] = (fcy - cy_grid[sel]) / config.point_scale
            reg[2, sel] = np.log(size / config.point_scale)

    weights = np.zeros((cells_h, cells_w))
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos and n_neg:
        weights[labels == 1] = 0.5 / n_pos
        weights[labels == 0] = 0.5 / n_neg
    elif n_neg:
        weights[labels == 0] = 1.0 / n_neg
    elif n_pos:
        weights[labels == 1] = 1.0 / n_pos
    return RpnTargets(labels, weights, reg, sizes)


def rpn_losses(state: RpnState, targets: RpnTargets, config: TrainConfig,
               multitask: bool = True):
    """Multi-task proposal loss and the gradients of both head maps."""
    cells_h, cells_w = targets.labels.shape
    logits = state.score.reshape(2, -1).T
    flat_labels = np.clip(targets.labels.reshape(-1), 0, 1)
    flat_weights = targets.cls_weights.reshape(-1)
    cls_loss, probs = nn.softmax_cross_entropy(logits, flat_labels, flat_weights)
    d_logits = nn.softmax_cross_entropy_backward(probs, flat_labels, flat_weights)
    d_score = d_logits.T.reshape(state.score.shape)

    d_point = np.zeros_like(state.point)
    pos = targets.labels == 1
    reg_loss = 0.0
    n_pos = int(pos.sum())
    if n_pos:
        pred = state.point[:, pos]
        tgt = targets.reg_targets[:, pos]
        if multitask:
            # error measured in box-normalized coordinates
            norm = (config.point_scale / targets.face_size[pos])[None, :]
            diff = (pred - tgt) * norm
            reg_loss = float((diff**2).mean(axis=0).sum() / n_pos)
            d_point[:, pos] = (
                config.lambda_landmark
                * 2.0
                * diff
                * norm
                / (pred.shape[0] * n_pos)
            )
        else:
            diff = pred - tgt
            reg_loss = float((diff**2).mean(axis=0).sum() / n_pos)
            d_point[:, pos] = (
                config.lambda_landmark * 2.0 * diff / (pred.shape[0] * n_pos)
            )
    loss = MultiTaskLoss(cls_loss, reg_loss, config.lambda_landmark)
    return loss, d_score, d_point, probs.reshape(cells_h, cells_w, 2)


# --------------------------------------------------------------------------
# verification path (shared by training and inference)


def l2_normalize(x: np.ndarray, eps: float = 1e-6):
    """Unit-norm feature scaling; keeps the verdict head's input bounded
    regardless of how the upstream feature magnitudes drift in training."""
    norm = float(np.sqrt(np.dot(x, x) + eps * eps))
    return x / norm, norm


def l2_normalize_backward(d_out: np.ndarray, x: np.ndarray, norm: float):
    return d_out / norm - x * (np.dot(x, d_out) / norm**3)


def crop_transform(box, rect_size: int):
    """Axis-aligned crop of a box's bounding square onto the rectified grid."""
    x, y, w, h = box
    side = max(w, h)
    return similarity_from_pose(
        side / rect_size,
        0.0,
        (x + w / 2.0, y + h / 2.0),
        ((rect_size - 1) / 2.0, (rect_size - 1) / 2.0),
    )


@dataclass
class VerifyCache:
    crop: np.ndarray
    transform: object
    z1: np.ndarray
    a1: np.ndarray
    p1: np.ndarray
    idx1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    p2: np.ndarray
    idx2: np.ndarray
    flat: np.ndarray
    feat_pre: np.ndarray
    feat: np.ndarray
    feat_norm: float
    rpn_feat: np.ndarray | None
    rpn_norm: float
    joint: np.ndarray
    logits: np.ndarray


def verify_forward(model: DetectorModel, image: np.ndarray, transform,
                   rpn_feat: np.ndarray | None) -> VerifyCache:
    crop = warp(image, transform, (model.rect_size, model.rect_size))
    z1 = _conv(model.rcnn.conv1, crop)
    a1 = nn.relu(z1)
    p1, idx1 = nn.maxpool2x2(a1)
    z2 = _conv(model.rcnn.conv2, p1)
    a2 = nn.relu(z2)
    p2, idx2 = nn.maxpool2x2(a2)
    flat = p2.reshape(-1)
    feat_pre = nn.fully_connected(flat, model.rcnn.fc.weight, model.rcnn.fc.bias)
    feat = nn.relu(feat_pre)
    feat_n, feat_norm = l2_normalize(feat)
    if model.use_concat:
        rpn_n, rpn_norm = l2_normalize(rpn_feat)
        joint = nn.concat_features(rpn_n, feat_n)
    else:
        rpn_norm = 1.0
        joint = feat_n
    logits = nn.fully_connected(joint, model.verdict.weight, model.verdict.bias)
    return VerifyCache(crop, transform, z1, a1, p1, idx1, z2, a2, p2, idx2,
                       flat, feat_pre, feat, feat_norm, rpn_feat, rpn_norm,
                       joint, logits)


def verify_backward(model: DetectorModel, cache: VerifyCache, d_logits):
    """Backward through verdict, verification net and (optionally) the warp.

    Returns (layer-parameter grads in model order, d_rpn_feat or None,
    d_crop upstream already folded into warp terms via the caller).
    """
    d_joint, d_wv, d_bv = nn.fully_connected_backward(
        d_logits, cache.joint, model.verdict.weight
    )
    if model.use_concat:
        n_rpn = cache.rpn_feat.shape[0]
        d_rpn_n, d_feat_n = nn.concat_features_backward(d_joint, n_rpn)
        d_rpn_feat = l2_normalize_backward(d_rpn_n, cache.rpn_feat, cache.rpn_norm)
    else:
        d_rpn_feat, d_feat_n = None, d_joint
    d_feat = l2_normalize_backward(d_feat_n, cache.feat, cache.feat_norm)
    d_feat_pre = nn.relu_backward(d_feat, cache.feat_pre)
    d_flat, d_wfc, d_bfc = nn.fully_connected_backward(
        d_feat_pre, cache.flat, model.rcnn.fc.weight
    )
    d_p2 = d_flat.reshape(cache.p2.shape)
    d_a2 = nn.maxpool2x2_backward(d_p2, cache.idx2, cache.a2.shape)
    d_z2 = nn.relu_backward(d_a2, cache.z2)
    d_p1, d_w2, d_b2 = nn.conv2d_backward(
        d_z2, cache.p1, model.rcnn.conv2.filters, model.rcnn.conv2.spec, with_bias=True
    )
    d_a1 = nn.maxpool2x2_backward(d_p1, cache.idx1, cache.a1.shape)
    d_z1 = nn.relu_backward(d_a1, cache.z1)
    d_crop, d_w1, d_b1 = nn.conv2d_backward(
        d_z1, cache.crop, model.rcnn.conv1.filters, model.rcnn.conv1.spec,
        with_bias=True,
    )
    rcnn_grads = [d_w1, d_b1, d_w2, d_b2, d_wfc, d_bfc]
    return rcnn_grads, [d_wv, d_bv], d_rpn_feat, d_crop


# --------------------------------------------------------------------------
# training drivers


class _GradAccumulator:
    def __init__(self, params):
        self.params = params
        self.grads = [np.zeros_like(p) for p in params]
        self._index = {id(p): i for i, p in enumerate(params)}

    def add(self, param, grad):
        self.grads[self._index[id(param)]] += grad

    def add_many(self, params, grads):
        for p, g in zip(params, grads):
            self.add(p, g)


def _rpn_param_list(rpn: RpnNet):
    return rpn.params()


def train_rpn(corpus, config: TrainConfig, model: DetectorModel | None = None,
              epochs: int | None = None):
    """Train the proposal net alone (classification + regression heads).

    Returns (model, history); history carries per-epoch classification
    accuracy and mean landmark error in pixels normalized to a 36-px face.
    """
    if model is None:
        model = build_detector(config)
    rng = np.random.default_rng(config.seed + 1)
    params = _rpn_param_list(model.rpn)
    opt = SgdOptimizer(config.learning_rate, config.momentum)
    history = {"epochs": []}
    n_epochs = config.epochs if epochs is None else epochs
    order = np.arange(len(corpus))
    for epoch in range(n_epochs):
        rng.shuffle(order)
        cls_correct = cls_total = 0
        lm_errors = []
        losses = []
        for idx in order:
            sample = corpus[idx]
            state = rpn_forward(model.rpn, sample.image)
            ch, cw = state.score.shape[1:]
            targets = rpn_targets(sample.faces, ch, cw, config, model.multitask)
            loss, d_score, d_point, probs = rpn_losses(
                state, targets, config, model.multitask
            )
            if not np.isfinite(loss.total):
                raise DivergenceError(
                    f"proposal loss diverged at epoch {epoch}: {loss.total}"
                )
            losses.append(loss.total)
            grads = rpn_backward(model.rpn, state, d_score, d_point)
            opt.step(params, grads)

            decided = targets.labels >= 0
            pred_cls = (probs[..., 1] > 0.5).astype(np.int64)
            cls_correct += int((pred_cls[decided] == targets.labels[decided]).sum())
            cls_total += int(decided.sum())
            if model.multitask:
                lm_errors.extend(
                    _landmark_errors(state, targets, config)
                )
        history["epochs"].append(
            {
                "loss": float(np.mean(losses)),
                "cls_accuracy": cls_correct / max(1, cls_total),
                "landmark_error_36px": float(np.mean(lm_errors)) if lm_errors else None,
            }
        )
    return model, history


def _landmark_errors(state, targets, config):
    """Per-positive-cell mean landmark error, rescaled to a 36-px face."""
    pos = targets.labels == 1
    if not pos.any():
        return []
    pred = state.point[:, pos] * config.point_scale
    tgt = targets.reg_targets[:, pos] * config.point_scale
    diff = (pred - tgt).T.reshape(-1, 5, 2)
    err = np.linalg.norm(diff, axis=2).mean(axis=1)
    scale = 36.0 / targets.face_size[pos]
    return list(err * scale)


def landmark_error_on_corpus(model: DetectorModel, corpus, config: TrainConfig):
    """Mean predicted-landmark error (px, 36-px-face normalized) over the
    ground-truth-positive cells of a held-out corpus."""
    errors = []
    for sample in corpus:
        state = rpn_forward(model.rpn, sample.image)
        ch, cw = state.score.shape[1:]
        targets = rpn_targets(sample.faces, ch, cw, config, model.multitask)
        errors.extend(_landmark_errors(state, targets, config))
    return float(np.mean(errors))


def _predicted_landmarks(state, i, j, point_scale):
    xs, ys = cell_centers(state.point.shape[1], state.point.shape[2])
    center = np.array([xs[j], ys[i]])
    return state.point[:, i, j].reshape(5, 2) * point_scale + center


def _predicted_box(state, i, j, point_scale):
    xs, ys = cell_centers(state.point.shape[1], state.point.shape[2])
    dx, dy, dlog = state.point[:, i, j]
    cx = xs[j] + dx * point_scale
    cy = ys[i] + dy * point_scale
    side = point_scale * np.exp(dlog)
    return (cx - side / 2.0, cy - side / 2.0, side, side)


def train_end_to_end(corpus, model: DetectorModel, config: TrainConfig,
                     snapshot_every: int = 500):
    """Joint training of proposal net, verification net, verdict head and
    (when enabled) the canonical positions. Returns (model, history) with
    canonical-position snapshots along the run."""
    rng = np.random.default_rng(config.seed + 2)
    supervised = bool(model.extras.get("supervised_transform", True))
    params = model.params()
    opt = SgdOptimizer(config.learning_rate, config.momentum)
    history = {
        "canonical_snapshots": [model.canonical.points.copy()],
        "epochs": [],
        "singular_skips": 0,
    }
    order = np.arange(len(corpus))
    seen = 0
    for epoch in range(config.epochs):
        rng.shuffle(order)
        verdict_correct = verdict_total = 0
        losses = []
        for idx in order:
            sample = corpus[idx]
            acc = _GradAccumulator(params)
            state = rpn_forward(model.rpn, sample.image)
            ch, cw = state.score.shape[1:]
            targets = rpn_targets(sample.faces, ch, cw, config, model.multitask)
            loss, d_score, d_point, probs = rpn_losses(
                state, targets, config, model.multitask
            )
            if not np.isfinite(loss.total):
                raise DivergenceError(f"loss diverged at epoch {epoch}")
            d_feat_extra = np.zeros_like(state.feat)

            cells = _sample_cells(targets, probs, rng, config.samples_per_image)
            verdict_losses = []
            loss_weight = 1.0 / max(1, len(cells))  # mean over the image's batch
            for (i, j, label) in cells:
                out = _candidate_step(
                    model, sample.image, state, targets, i, j, label,
                    acc, d_point, d_feat_extra, supervised, config, loss_weight,
                )
                if out is None:
                    history["singular_skips"] += 1
                    continue
                vloss, correct = out
                verdict_losses.append(vloss)
                verdict_correct += correct
                verdict_total += 1

            rpn_grads = rpn_backward(model.rpn, state, d_score, d_point, d_feat_extra)
            acc.add_many(_rpn_param_list(model.rpn), rpn_grads)
            if model.canonical.trainable:
                ci = acc._index[id(model.canonical.points)]
                acc.grads[ci] *= config.canonical_lr_scale
            opt.step(params, acc.grads)
            if model.canonical.trainable:
                model.canonical.clamp(model.rect_size, model.rect_size)
            losses.append(loss.total + float(np.mean(verdict_losses or [0.0])))
            seen += 1
            if seen % snapshot_every == 0:
                history["canonical_snapshots"].append(model.canonical.points.copy())
        history["epochs"].append(
            {
                "loss": float(np.mean(losses)),
                "verdict_accuracy": verdict_correct / max(1, verdict_total),
            }
        )
        history["canonical_snapshots"].append(model.canonical.points.copy())
    return model, history


def _sample_cells(targets: RpnTargets, probs, rng, per_class: int):
    """Pick positive and negative cells for verification training; half the
    negatives are drawn by current face probability (hard negatives), the
    rest uniformly."""
    cells = []
    pos = np.argwhere(targets.labels == 1)
    if len(pos):
        take = pos[rng.choice(len(pos), size=min(per_class, len(pos)), replace=False)]
        cells.extend((int(i), int(j), 1) for i, j in take)
    neg = np.argwhere(targets.labels == 0)
    if len(neg):
        n_hard = min((per_class + 1) // 2, len(neg))
        weights = probs[neg[:, 0], neg[:, 1], 1] + 1e-3
        weights = weights / weights.sum()
        hard = rng.choice(len(neg), size=n_hard, replace=False, p=weights)
        chosen = set(hard.tolist())
        remaining = [k for k in range(len(neg)) if k not in chosen]
        n_rand = min(per_class - n_hard, len(remaining))
        if n_rand > 0:
            rand = rng.choice(len(remaining), size=n_rand, replace=False)
            chosen.update(remaining[r] for r in rand)
        cells.extend((int(neg[k][0]), int(neg[k][1]), 0) for k in sorted(chosen))
    return cells


def _candidate_step(model, image, state, targets, i, j, label, acc,
                    d_point, d_feat_extra, supervised, config, loss_weight=1.0):
    """Forward + backward for one sampled verification candidate. Returns
    (verdict loss, correct flag) or None when the similarity fit is singular."""
    if model.multitask:
        lms = _predicted_landmarks(state, i, j, model.point_scale)
        try:
            transform = estimate_similarity(lms, model.canonical)
        except SingularTransformError:
            return None
    else:
        box = _predicted_box(state, i, j, model.point_scale)
        transform = crop_transform(box, model.rect_size)
        lms = None

    rpn_feat = state.feat[:, i, j].copy() if model.use_concat else None
    cache = verify_forward(model, image, transform, rpn_feat)
    vloss, probs_v = nn.softmax_cross_entropy(cache.logits, label)
    d_logits = nn.softmax_cross_entropy_backward(probs_v, label) * loss_weight
    rcnn_grads, verdict_grads, d_rpn_feat, d_crop = verify_backward(
        model, cache, d_logits
    )
    acc.add_many(model.rcnn.params(), rcnn_grads)
    acc.add_many(model.verdict.params(), verdict_grads)
    if d_rpn_feat is not None:
        d_feat_extra[:, i, j] += config.concat_supervision_scale * d_rpn_feat

    if model.multitask and supervised and label == 1:
        # geometry supervision from the verdict loss applies to true faces;
        # a background candidate's landmarks carry no pose to refine
        grads = warp_backward(d_crop, image, transform)
        grads = landmark_and_canonical_gradients(grads, lms, model.canonical.points)
        # landmarks came from the head as offsets scaled by point_scale
        d_point[:, i, j] += (
            config.warp_supervision_scale
            * grads.d_landmarks.reshape(-1)
            * model.point_scale
        )
        if model.canonical.trainable:
            acc.add(model.canonical.points, grads.d_canonical)
    predicted = int(np.argmax(cache.logits))
    return vloss, int(predicted == label)


# --------------------------------------------------------------------------
# detection


def _dense_levels(image: np.ndarray, max_levels: int):
    levels = []
    current = image
    for k in range(max_levels):
        if min(current.shape[1], current.shape[2]) < 48:
            break
        levels.append((k, current, None))
        current = downsample_image(current)
    return levels


def _roi_levels(image: np.ndarray, model: DetectorModel, options: DetectOptions):
    gray = to_grayscale(image)
    raw = cascade_scan(
        gray, model.cascade, threshold_offset=options.prefilter_offset
    )
    groups = group_candidates([d.box for d in raw])
    pyramid = RoiPyramid.build(image, groups)
    return [(k, img, mask) for k, img, mask in pyramid.levels], raw


def _level_candidates(model, state, octave, options):
    """Detections proposed by one pyramid level's score map."""
    probs = np.exp(nn.log_softmax(state.score.reshape(2, -1).T))[:, 1]
    ch, cw = state.score.shape[1:]
    probs = probs.reshape(ch, cw)
    eligible = probs >= options.proposal_threshold
    if state.head_mask is not None:
        eligible &= state.head_mask.bits
    scale = 2.0**octave
    out = []
    for i, j in np.argwhere(eligible):
        if model.multitask:
            lms_level = _predicted_landmarks(state, i, j, model.point_scale)
            lms = lms_level * scale
            try:
                box = box_from_landmarks(lms)
            except SingularTransformError:
                continue
        else:
            lms = None
            bx, by, bw, bh = _predicted_box(state, i, j, model.point_scale)
            box = (bx * scale, by * scale, bw * scale, bh * scale)
        out.append(
            Detection(
                box=box,
                score=float(probs[i, j]),
                landmarks=lms,
                extras={"feat": state.feat[:, i, j].copy(), "octave": octave},
            )
        )
    return out


def detect(image: np.ndarray, model: DetectorModel,
           options: DetectOptions = DetectOptions()) -> list[Detection]:
    """Full two-stage detection on one grayscale CHW image."""
    if image.ndim != 3:
        raise ValueError(f"expected CHW image, got {image.shape}")
    if options.use_roi_conv:
        if model.cascade is None:
            raise ValueError("ROI path requires a trained cascade pre-filter")
        levels, _ = _roi_levels(image, model, options)
    else:
        levels = _dense_levels(image, options.max_levels)

    candidates = []
    for octave, level_img, mask in levels:
        state = rpn_forward(model.rpn, level_img, mask)
        candidates.extend(_level_candidates(model, state, octave, options))

    cfg = SuppressionConfig(iou_threshold=options.iou_threshold, k=options.k)
    if options.suppression == "non_top_k":
        kept = non_top_k(candidates, cfg)
    elif options.suppression == "nms":
        kept = nms(candidates, cfg)
    elif options.suppression == "none":
        kept = list(candidates)
    else:
        raise ValueError(f"unknown suppression mode {options.suppression!r}")

    final = []
    for cand in kept:
        if model.multitask:
            try:
                transform = estimate_similarity(cand.landmarks, model.canonical)
            except SingularTransformError:
                continue
        else:
            transform = crop_transform(cand.box, model.rect_size)
        rpn_feat = cand.extras["feat"] if model.use_concat else None
        cache = verify_forward(model, image, transform, rpn_feat)
        prob = float(np.exp(nn.log_softmax(cache.logits))[1])
        if prob >= options.verdict_threshold:
            final.append(
                Detection(cand.box, prob, landmarks=cand.landmarks,
                          extras={"proposal_score": cand.score})
            )
    if options.final_nms:
        final = nms(final, SuppressionConfig(iou_threshold=0.5, k=1))
    return final


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    scores: np.ndarray     # detection scores, descending
    tp_flags: np.ndarray   # 1 where the detection matched a ground truth
    total_gt: int

    @property
    def pr_points(self):
        """(threshold, precision, recall) per prefix of the sorted detections."""
        tp = np.cumsum(self.tp_flags)
        ranks = np.arange(1, len(self.tp_flags) + 1)
        precision = tp / ranks
        recall = tp / max(1, self.total_gt)
        return list(zip(self.scores.tolist(), precision.tolist(), recall.tolist()))

    def recall_at_false_alarms(self, budget: int) -> float:
        fp = np.cumsum(1 - self.tp_flags)
        tp = np.cumsum(self.tp_flags)
        ok = fp <= budget
        if not ok.any():
            return 0.0
        return float(tp[ok].max() / max(1, self.total_gt))

    def average_precision(self) -> float:
        tp = np.cumsum(self.tp_flags)
        ranks = np.arange(1, len(self.tp_flags) + 1)
        precision = tp / ranks
        return float((precision * self.tp_flags).sum() / max(1, self.total_gt))


def evaluate(detections_per_image, truths_per_image, iou_threshold: float = 0.5
             ) -> EvalReport:
    """Greedy score-ordered matching, one detection per ground truth."""
    if len(detections_per_image) != len(truths_per_image):
        raise ValueError("detections and truths must cover the same images")
    rows = []
    for img_idx, dets in enumerate(detections_per_image):
        for d in dets:
            rows.append((-d.score, d.x, d.y, img_idx, d))
    rows.sort(key=lambda r: r[:3])
    matched = [set() for _ in truths_per_image]
    tp_flags = np.zeros(len(rows), dtype=np.int64)
    scores = np.zeros(len(rows))
    for pos, (neg_score, _, _, img_idx, det) in enumerate(rows):
        scores[pos] = -neg_score
        best_iou, best_gt = 0.0, None
        for gt_idx, gt_box in enumerate(truths_per_image[img_idx]):
            if gt_idx in matched[img_idx]:
                continue
            value = iou(det.box, gt_box)
            if value > best_iou:
                best_iou, best_gt = value, gt_idx
        if best_gt is not None and best_iou >= iou_threshold:
            matched[img_idx].add(best_gt)
            tp_flags[pos] = 1
    total_gt = sum(len(t) for t in truths_per_image)
    return EvalReport(scores, tp_flags, total_gt)


# --------------------------------------------------------------------------
# cascade integration and benchmarks


def crop_patch(image: np.ndarray, box, out_size: int) -> np.ndarray:
    """Resize a box's bounding square out of a CHW image."""
    return warp(image, crop_transform(box, out_size), (out_size, out_size))[0]


def harvest_cascade_patches(corpus, rng, negatives_per_image: int = 3,
                            patch_size: int = 32):
    """Face crops and face-free crops from a corpus, as 32x32 patches."""
    pos, neg = [], []
    for sample in corpus:
        h, w = sample.image.shape[1:]
        for box, _ in sample.faces:
            pos.append(crop_patch(sample.image, box, patch_size))
        for _ in range(negatives_per_image):
            for _attempt in range(10):
                side = rng.uniform(36, 72)
                x = rng.uniform(0, w - side)
                y = rng.uniform(0, h - side)
                cand = (x, y, side, side)
                if all(iou(cand, box) < 0.1 for box, _ in sample.faces):
                    neg.append(crop_patch(sample.image, cand, patch_size))
                    break
    return np.array(pos), np.array(neg)


def train_prefilter(corpus, num_ferns: int = 120, candidate_pool: int = 60,
                    seed: int = 0, per_stage_detection_target: float = 0.99):
    """Train the fern cascade on corpus-derived patches."""
    rng = np.random.default_rng(seed + 3)
    pos, neg = harvest_cascade_patches(corpus, rng)
    cfg = CascadeConfig(
        num_ferns=num_ferns,
        candidate_pool=candidate_pool,
        per_stage_detection_target=per_stage_detection_target,
        seed=seed,
    )
    return train_cascade(pos, neg, cfg)


def bench_roiconv(height: int, width: int, in_channels: int, out_channels: int,
                  kernel: int, sparsities, reps: int = 5, seed: int = 0):
    """Wall-time comparison of masked vs dense convolution at controlled
    sparsities. Returns one row dict per sparsity."""
    rng = np.random.default_rng(seed)
    spec = ConvSpec(in_channels, out_channels, kernel, padding=kernel // 2)
    x = rng.standard_normal((in_channels, height, width))
    filters = rng.standard_normal((out_channels, in_channels, kernel, kernel))
    oh, ow = spec.out_size(height, width)

    def time_call(fn):
        best = []
        for _ in range(reps):
            start = time.perf_counter()
            fn()
            best.append(time.perf_counter() - start)
        return float(np.median(best)) * 1000.0

    dense_ms = time_call(lambda: nn.conv2d_forward(x, filters, spec))
    rows = []
    for sparsity in sparsities:
        m = int(round(sparsity * oh * ow))
        flat = rng.choice(oh * ow, size=m, replace=False)
        bits = np.zeros(oh * ow, dtype=bool)
        bits[flat] = True
        mask = RoiMask(bits.reshape(oh, ow))
        roi_ms = time_call(lambda: roi_conv_forward(x, filters, mask, spec))
        from .roiconv import roi_conv_macs

        rows.append(
            {
                "sparsity": sparsity,
                "m": mask.ones_count,
                "macs": roi_conv_macs(mask, spec),
                "dense_ms": dense_ms,
                "roi_ms": roi_ms,
                "ratio": roi_ms / dense_ms,
            }
        )
    return rows


def sparsity_mask_from_boxes(height: int, width: int, target: float,
                             rng: np.random.Generator) -> RoiMask:
    """Union-of-boxes mask tuned to approximately the target sparsity."""
    from .roiconv import build_mask

    if target >= 1.0:
        return RoiMask.ones(height, width)
    bits = np.zeros((height, width), dtype=bool)
    while bits.mean() < target:
        side = rng.uniform(30, 60)
        x = rng.uniform(0, width - side)
        y = rng.uniform(0, height - side)
        extra = build_mask([(x, y, side / 2, side / 2)], (height, width))
        bits |= extra.bits
    return RoiMask(bits)


def bench_pipeline(model: DetectorModel, samples, options: DetectOptions,
                   reps: int = 1):
    """Stage timings over an image set: pre-filter, proposal net (dense and
    masked), verification, and mask sparsity."""
    prefilter_ms = rpn_dense_ms = rpn_roi_ms = rcnn_ms = 0.0
    sparsities = []
    n_candidates = 0
    for sample in samples:
        image = sample.image
        start = time.perf_counter()
        levels_roi, _ = _roi_levels(image, model, options)
        prefilter_ms += (time.perf_counter() - start) * 1000.0

        start = time.perf_counter()
        dense_states = [
            rpn_forward(model.rpn, img) for _, img, _ in _dense_levels(image, 4)
        ]
        rpn_dense_ms += (time.perf_counter() - start) * 1000.0

        start = time.perf_counter()
        roi_states = [
            (k, rpn_forward(model.rpn, img, mask)) for k, img, mask in levels_roi
        ]
        rpn_roi_ms += (time.perf_counter() - start) * 1000.0
        sparsities.extend(mask.sparsity for _, _, mask in levels_roi)

        cands = []
        for k, state in roi_states:
            cands.extend(_level_candidates(model, state, k, options))
        kept = non_top_k(
            cands, SuppressionConfig(iou_threshold=options.iou_threshold, k=options.k)
        )
        start = time.perf_counter()
        for cand in kept:
            try:
                transform = (
                    estimate_similarity(cand.landmarks, model.canonical)
                    if model.multitask
                    else crop_transform(cand.box, model.rect_size)
                )
            except SingularTransformError:
                continue
            verify_forward(
                model, image, transform,
                cand.extras["feat"] if model.use_concat else None,
            )
            n_candidates += 1
        rcnn_ms += (time.perf_counter() - start) * 1000.0
        del dense_states
    n = max(1, len(samples))
    return {
        "images": len(samples),
        "prefilter_ms": prefilter_ms / n,
        "rpn_dense_ms": rpn_dense_ms / n,
        "rpn_roi_ms": rpn_roi_ms / n,
        "rpn_roi_fraction": rpn_roi_ms / max(rpn_dense_ms, 1e-9),
        "rcnn_ms": rcnn_ms / n,
        "total_roi_ms": (prefilter_ms + rpn_roi_ms + rcnn_ms) / n,
        "mean_sparsity": float(np.mean(sparsities)) if sparsities else 0.0,
        "verified_candidates": n_candidates,
    }
