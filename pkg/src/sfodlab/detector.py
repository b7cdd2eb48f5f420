"""Desk-scale two-stage anchor detector with manual backpropagation.

Structure mirrors the classic two-stage layout: a small conv backbone with
batch normalization, a region proposal network (objectness + box deltas on
a fixed anchor grid), and an ROI head (max-pooled proposal features through
two hidden linear layers into classification and per-class box refinement).

Training exposes the four-term loss (RPN classification, RPN regression,
ROI classification, ROI regression) with the regression terms toggleable.
Proposal boxes and all sampling decisions are frozen into a TrainPlan;
gradients flow only through network activations, never through proposal
coordinates, so the analytic gradients can be verified against finite
differences of ``training_loss`` on the same plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import boxes as B
from .batchnorm import batch_stats, bn_apply, bn_backward, ema_running_update
from .ops import (
    NumericsError,
    conv2d_backward,
    conv2d_forward,
    conv2d_forward_cols,
    linear_backward,
    linear_forward,
    maxpool2_forward,
    maxpool2_scatter,
    maxpool2_with_indices,
    relu_backward,
    relu_forward,
    smooth_l1,
    softmax_cross_entropy,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ArchDescriptor:
    """Fixed architecture parameters; two models with equal descriptors are
    parameter-compatible (EMA-combinable entry by entry)."""

    input_size: int = 96
    in_channels: int = 3
    channels: tuple = (8, 16, 32, 64)
    feature_stride: int = 8
    anchor_scales: tuple = (16.0, 32.0, 64.0)
    anchor_aspects: tuple = (0.5, 1.0, 2.0)
    num_classes: int = 3
    rpn_channels: int = 64
    roi_pool_size: int = 5
    roi_hidden: int = 256
    rpn_pos_thr: float = 0.7
    rpn_neg_thr: float = 0.3
    roi_pos_thr: float = 0.5
    rpn_sample: int = 64
    rpn_pos_fraction: float = 0.5
    roi_sample: int = 32
    roi_pos_fraction: float = 0.25
    pre_nms_topk: int = 100
    post_nms_topk: int = 50
    proposal_nms_iou: float = 0.7

    def __post_init__(self):
        n_pools = int(np.log2(self.feature_stride))
        if 2 ** n_pools != self.feature_stride:
            raise ValueError("feature_stride must be a power of two")
        if self.input_size % self.feature_stride:
            raise ValueError("feature_stride must divide input_size")
        if n_pools > len(self.channels):
            raise ValueError("not enough blocks for the requested stride")
        if self.num_anchors < 1:
            raise ValueError("need at least one anchor per cell")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_aspects)

    @property
    def feature_size(self) -> int:
        return self.input_size // self.feature_stride

    @property
    def n_pools(self) -> int:
        return int(np.log2(self.feature_stride))

    def bn_layers(self):
        return [(f"backbone.b{i}.bn", c) for i, c in enumerate(self.channels)]

    def param_shapes(self) -> dict:
        """Ordered name -> shape map defining the ModelState layout."""
        a = self.num_anchors
        k = self.num_classes
        shapes = {}
        cin = self.in_channels
        for i, c in enumerate(self.channels):
            shapes[f"backbone.b{i}.conv.w"] = (c, cin, 3, 3)
            shapes[f"backbone.b{i}.conv.b"] = (c,)
            shapes[f"backbone.b{i}.bn.gamma"] = (c,)
            shapes[f"backbone.b{i}.bn.beta"] = (c,)
            shapes[f"backbone.b{i}.bn.running_mean"] = (c,)
            shapes[f"backbone.b{i}.bn.running_var"] = (c,)
            cin = c
        shapes["rpn.conv.w"] = (self.rpn_channels, cin, 3, 3)
        shapes["rpn.conv.b"] = (self.rpn_channels,)
        shapes["rpn.obj.w"] = (2 * a, self.rpn_channels, 1, 1)
        shapes["rpn.obj.b"] = (2 * a,)
        shapes["rpn.delta.w"] = (4 * a, self.rpn_channels, 1, 1)
        shapes["rpn.delta.b"] = (4 * a,)
        d = cin * self.roi_pool_size ** 2
        shapes["roi.fc1.w"] = (d, self.roi_hidden)
        shapes["roi.fc1.b"] = (self.roi_hidden,)
        shapes["roi.fc2.w"] = (self.roi_hidden, self.roi_hidden)
        shapes["roi.fc2.b"] = (self.roi_hidden,)
        shapes["roi.cls.w"] = (self.roi_hidden, k + 1)
        shapes["roi.cls.b"] = (k + 1,)
        shapes["roi.delta.w"] = (self.roi_hidden, 4 * k)
        shapes["roi.delta.b"] = (4 * k,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("channels", "anchor_scales", "anchor_aspects"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        d = dict(d)
        for key in ("channels", "anchor_scales", "anchor_aspects"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LossBreakdown:
    rpn_cls: float
    rpn_reg: float
    roi_cls: float
    roi_reg: float

    @property
    def total(self) -> float:
        return self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg


STAT_SUFFIXES = (".running_mean", ".running_var")


@dataclass
class ModelState:
    """Named parameter collection: weights, BN affine and BN statistics."""

    arch: ArchDescriptor
    params: dict

    def copy(self) -> "ModelState":
        return ModelState(self.arch, {k: v.copy() for k, v in self.params.items()})

    def trainable_names(self):
        return [k for k in self.params if not k.endswith(STAT_SUFFIXES)]

    def stat_names(self):
        return [k for k in self.params if k.endswith(STAT_SUFFIXES)]


def init_model(arch: ArchDescriptor, seed: int = 0) -> ModelState:
    """He-initialized weights, zero biases, identity BN, small head weights."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith((".gamma", ".running_var")):
            params[name] = np.ones(shape, np.float32)
        elif name.endswith((".beta", ".running_mean", ".b")):
            params[name] = np.zeros(shape, np.float32)
        elif name.startswith(("rpn.obj", "rpn.delta", "roi.cls", "roi.delta")):
            params[name] = rng.normal(0, 0.01, shape).astype(np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.normal(0, np.sqrt(2.0 / fan_in), shape).astype(np.float32)
    return ModelState(arch, params)


def images_to_batch(images) -> np.ndarray:
    """Stack HWC float images in [0,1] into an NCHW float32 batch."""
    arr = np.stack([np.asarray(im) for im in images])
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32)


def generate_anchors(arch: ArchDescriptor) -> np.ndarray:
    """Anchor grid in (y, x, anchor) order matching the RPN map layout.

    Aspects are height/width ratios; anchors are centered on feature cells.
    """
    f, s = arch.feature_size, arch.feature_stride
    base = []
    for scale in arch.anchor_scales:
        for aspect in arch.anchor_aspects:
            h = scale * np.sqrt(aspect)
            w = scale / np.sqrt(aspect)
            base.append((-w / 2, -h / 2, w / 2, h / 2))
    base = np.asarray(base, np.float32)
    cy, cx = (np.mgrid[0:f, 0:f].astype(np.float32) + 0.5) * s
    centers = np.stack([cx, cy, cx, cy], axis=-1)  # (f, f, 4)
    anchors = centers[:, :, None, :] + base[None, None, :, :]
    return anchors.reshape(-1, 4)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _backbone_forward(model: ModelState, x: np.ndarray, mode: str):
    """Run the conv/BN/ReLU/pool blocks.

    mode 'train' uses batch statistics and folds them into the running
    estimates (mutating model.params); 'collect' uses batch statistics
    without touching the model; 'eval' uses the stored running estimates.
    Returns (features, per-block caches, per-layer batch statistics).
    """
    p = model.params
    arch = model.arch
    caches = []
    stats = []
    h = x
    for i in range(len(arch.channels)):
        pre = f"backbone.b{i}"
        conv_in = h
        if mode == "eval":
            conv_out = conv2d_forward(h, p[f"{pre}.conv.w"], p[f"{pre}.conv.b"], 1, 1)
            cols = None
        else:
            conv_out, cols = conv2d_forward_cols(
                h, p[f"{pre}.conv.w"], p[f"{pre}.conv.b"], 1, 1)
        gamma, beta = p[f"{pre}.bn.gamma"], p[f"{pre}.bn.beta"]
        if mode == "eval":
            bn_out, _, _ = bn_apply(conv_out, p[f"{pre}.bn.running_mean"],
                                    p[f"{pre}.bn.running_var"], gamma, beta, BN_EPS)
            bn_cache = None
        else:
            mean, var = batch_stats(conv_out)
            stats.append((mean, var))
            bn_out, xhat, inv_std = bn_apply(conv_out, mean, var, gamma, beta, BN_EPS)
            bn_cache = (xhat, inv_std, gamma)
            if mode == "train":
                rm, rv = ema_running_update(
                    p[f"{pre}.bn.running_mean"], p[f"{pre}.bn.running_var"],
                    mean, var, BN_MOMENTUM)
                p[f"{pre}.bn.running_mean"] = rm.astype(np.float32)
                p[f"{pre}.bn.running_var"] = rv.astype(np.float32)
        relu_out = relu_forward(bn_out)
        pooled = i < arch.n_pools
        pool_idx = None
        if pooled and mode == "eval":
            h = maxpool2_forward(relu_out)
        elif pooled:
            h, pool_idx = maxpool2_with_indices(relu_out)
        else:
            h = relu_out
        caches.append({"conv_in": conv_in, "cols": cols, "bn_cache": bn_cache,
                       "bn_out": bn_out, "pool_idx": pool_idx,
                       "pool_in_shape": relu_out.shape, "pooled": pooled})
    return h, caches, stats


def _backbone_backward(model: ModelState, caches, dfeats, grads):
    p = model.params
    d = dfeats
    for i in reversed(range(len(model.arch.channels))):
        pre = f"backbone.b{i}"
        c = caches[i]
        if c["pooled"]:
            d = maxpool2_scatter(d, c["pool_idx"], c["pool_in_shape"])
        d = relu_backward(d, c["bn_out"])
        d, dgamma, dbeta = bn_backward(d, c["bn_cache"])
        grads[f"{pre}.bn.gamma"] = dgamma
        grads[f"{pre}.bn.beta"] = dbeta
        d, dw, db = conv2d_backward(d, c["conv_in"], p[f"{pre}.conv.w"], 1, 1,
                                    cols=c["cols"])
        grads[f"{pre}.conv.w"] = dw
        grads[f"{pre}.conv.b"] = db
    return d


def backbone_batch_statistics(model: ModelState, x: np.ndarray):
    """Per-BN-layer (mean, var) of a batch under frozen weights."""
    _, _, stats = _backbone_forward(model, x, mode="collect")
    return stats


def _rpn_forward(model: ModelState, feats: np.ndarray):
    p = model.params
    hidden_pre, cols = conv2d_forward_cols(feats, p["rpn.conv.w"], p["rpn.conv.b"], 1, 1)
    hidden = relu_forward(hidden_pre)
    obj_map = conv2d_forward(hidden, p["rpn.obj.w"], p["rpn.obj.b"], 1, 0)
    delta_map = conv2d_forward(hidden, p["rpn.delta.w"], p["rpn.delta.b"], 1, 0)
    return obj_map, delta_map, hidden_pre, hidden, cols


def _flatten_rpn(arch: ArchDescriptor, amap: np.ndarray, per_anchor: int):
    """(N, A*per, F, F) -> (N, F*F*A, per) matching the anchor grid order."""
    n, _, f, _ = amap.shape
    a = arch.num_anchors
    return (amap.reshape(n, a, per_anchor, f, f)
            .transpose(0, 3, 4, 1, 2)
            .reshape(n, f * f * a, per_anchor))


def _unflatten_rpn(arch: ArchDescriptor, flat: np.ndarray, per_anchor: int):
    n = flat.shape[0]
    f = arch.feature_size
    a = arch.num_anchors
    return np.ascontiguousarray(
        flat.reshape(n, f, f, a, per_anchor)
        .transpose(0, 3, 4, 1, 2)
        .reshape(n, a * per_anchor, f, f))


def _objectness_scores(obj_flat_img: np.ndarray) -> np.ndarray:
    """Foreground probability from per-anchor (background, foreground) logits."""
    z = obj_flat_img - obj_flat_img.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def _propose(arch: ArchDescriptor, anchors: np.ndarray, obj_flat_img: np.ndarray,
             delta_flat_img: np.ndarray):
    """Decode, clip, score-sort and NMS-prune one image's RPN output."""
    scores = _objectness_scores(obj_flat_img.astype(np.float64))
    boxes = B.decode_deltas(delta_flat_img, anchors)
    boxes = B.clip_boxes(boxes, arch.input_size, arch.input_size)
    wh_ok = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
    idx = np.where(wh_ok)[0]
    order = idx[np.lexsort((idx, -scores[idx]))][: arch.pre_nms_topk]
    dets = B.Detections(boxes[order], np.zeros(len(order), np.int64),
                        scores[order].astype(np.float32))
    kept = B.nms(dets, arch.proposal_nms_iou)
    return kept.boxes[: arch.post_nms_topk], kept.scores[: arch.post_nms_topk]


# ---------------------------------------------------------------------------
# ROI pooling
# ---------------------------------------------------------------------------

def _roi_cell_edges(lo: np.ndarray, hi: np.ndarray, out: int, size: int):
    """Integer source-cell ranges per output cell, vectorized over boxes."""
    lo = np.atleast_1d(np.asarray(lo, np.float64))
    hi = np.atleast_1d(np.asarray(hi, np.float64))
    edges = lo[:, None] + (hi - lo)[:, None] * (np.arange(out + 1) / out)
    c0 = np.clip(np.floor(edges[:, :-1]).astype(np.int64), 0, size - 1)
    c1 = np.clip(np.ceil(edges[:, 1:]).astype(np.int64), 1, size)
    c1 = np.maximum(c1, c0 + 1)
    return c0, c1


def _roi_pool_batch(feats_img: np.ndarray, boxes_feat: np.ndarray, out: int,
                    need_indices: bool = True):
    """Max-pool all proposals of one image at once.

    feats_img: (C, F, F); boxes_feat: (P, 4) in feature coordinates.
    Returns pooled (P, C, out, out) and, when need_indices, the absolute
    (row, col) index of each pooled maximum, shaped (C, P, out, out), for
    the backward scatter. Windows are padded by repeating the last cell,
    which cannot change the max or its first-occurrence index.
    """
    c, fh, fw = feats_img.shape
    y0, y1 = _roi_cell_edges(boxes_feat[:, 1], boxes_feat[:, 3], out, fh)
    x0, x1 = _roi_cell_edges(boxes_feat[:, 0], boxes_feat[:, 2], out, fw)
    ky = int((y1 - y0).max())
    kx = int((x1 - x0).max())
    yidx = np.minimum(y0[:, :, None] + np.arange(ky), y1[:, :, None] - 1)  # (P,out,ky)
    xidx = np.minimum(x0[:, :, None] + np.arange(kx), x1[:, :, None] - 1)  # (P,out,kx)
    window = feats_img[:, yidx[:, :, None, :, None], xidx[:, None, :, None, :]]
    # window: (C, P, out, out, ky, kx)
    p = len(boxes_feat)
    flat = window.reshape(c, p, out, out, ky * kx)
    if not need_indices:
        return flat.max(axis=4).transpose(1, 0, 2, 3), None, None
    amax = flat.argmax(axis=4)
    pooled = np.take_along_axis(flat, amax[..., None], axis=4)[..., 0]
    ay, ax = np.divmod(amax, kx)
    parange = np.arange(p)[None, :, None, None]
    grid = np.arange(out)
    yy = yidx[parange, grid[None, None, :, None], ay]
    xx = xidx[parange, grid[None, None, None, :], ax]
    return pooled.transpose(1, 0, 2, 3), yy, xx


def _roi_scatter_batch(dpooled: np.ndarray, yy: np.ndarray, xx: np.ndarray,
                       c: int, fh: int, fw: int) -> np.ndarray:
    """Accumulate pooled-cell gradients back onto one image's feature map."""
    vals = dpooled.transpose(1, 0, 2, 3)
    chan = np.arange(c)[:, None, None, None]
    lin = (chan * fh + yy) * fw + xx
    acc = np.bincount(lin.ravel(), weights=vals.ravel().astype(np.float64),
                      minlength=c * fh * fw)
    return acc.reshape(c, fh, fw).astype(dpooled.dtype)


def roi_pool(features: np.ndarray, box, out_size: int) -> np.ndarray:
    """Max-pool the feature cells under each cell of an out_size x out_size
    grid spanning the box (feature-map coordinates). A proposal smaller than
    one feature cell pools from its single covering cell."""
    boxes = np.asarray(box, np.float64).reshape(1, 4)
    pooled, _, _ = _roi_pool_batch(features, boxes, out_size)
    return pooled[0]


def roi_pool_backward(dout: np.ndarray, features: np.ndarray, box,
                      out_size: int) -> np.ndarray:
    """Scatter each pooled cell's gradient to the first maximum in its window."""
    boxes = np.asarray(box, np.float64).reshape(1, 4)
    _, yy, xx = _roi_pool_batch(features, boxes, out_size)
    c, fh, fw = features.shape
    return _roi_scatter_batch(dout[None], yy, xx, c, fh, fw)


# ---------------------------------------------------------------------------
# training plan
# ---------------------------------------------------------------------------

@dataclass
class TrainPlan:
    """Frozen sampling decisions of one training step: which anchors and
    proposals participate in each loss term, and their targets."""

    rpn_idx: list = field(default_factory=list)
    rpn_cls: list = field(default_factory=list)
    rpn_pos_idx: list = field(default_factory=list)
    rpn_reg_targets: list = field(default_factory=list)
    proposals: list = field(default_factory=list)
    roi_labels: list = field(default_factory=list)
    roi_reg_targets: list = field(default_factory=list)


def _sample(rng, pool: np.ndarray, count: int) -> np.ndarray:
    if len(pool) <= count:
        return pool
    return pool[np.sort(rng.choice(len(pool), size=count, replace=False))]


def _plan_from_outputs(arch: ArchDescriptor, anchors, obj_flat, delta_flat,
                       targets, rng) -> TrainPlan:
    plan = TrainPlan()
    for i in range(obj_flat.shape[0]):
        gt_boxes = np.asarray(targets[i][0], np.float32).reshape(-1, 4)
        gt_labels = np.asarray(targets[i][1], np.int64).reshape(-1)

        assign = B.match_anchors(anchors, gt_boxes, arch.rpn_pos_thr, arch.rpn_neg_thr)
        pos_pool = np.where(assign >= 0)[0]
        neg_pool = np.where(assign == B.ASSIGN_NEGATIVE)[0]
        n_pos = min(len(pos_pool), int(arch.rpn_sample * arch.rpn_pos_fraction))
        pos = _sample(rng, pos_pool, n_pos)
        neg = _sample(rng, neg_pool, arch.rpn_sample - len(pos))
        plan.rpn_idx.append(np.concatenate([pos, neg]))
        plan.rpn_cls.append(np.concatenate([np.ones(len(pos), np.int64),
                                            np.zeros(len(neg), np.int64)]))
        plan.rpn_pos_idx.append(pos)
        plan.rpn_reg_targets.append(
            B.encode_deltas(gt_boxes[assign[pos]], anchors[pos])
            if len(pos) else np.zeros((0, 4), np.float32))

        prop, _ = _propose(arch, anchors, obj_flat[i], delta_flat[i])
        if len(gt_boxes):
            prop = np.concatenate([prop, gt_boxes])
        if len(prop) == 0:
            prop = anchors[:1].copy()
        if len(gt_boxes):
            ious = B.iou_matrix(prop, gt_boxes)
            best_gt = ious.argmax(axis=1)
            best_iou = ious[np.arange(len(prop)), best_gt]
            labels = np.where(best_iou >= arch.roi_pos_thr,
                              gt_labels[best_gt] + 1, 0).astype(np.int64)
        else:
            best_gt = np.zeros(len(prop), np.int64)
            labels = np.zeros(len(prop), np.int64)
        pos_pool = np.where(labels > 0)[0]
        neg_pool = np.where(labels == 0)[0]
        n_pos = min(len(pos_pool), int(arch.roi_sample * arch.roi_pos_fraction))
        pos = _sample(rng, pos_pool, n_pos)
        n_neg = arch.roi_sample - len(pos)
        if len(neg_pool) >= n_neg:
            neg = _sample(rng, neg_pool, n_neg)
        elif len(neg_pool) > 0:
            neg = neg_pool[rng.integers(0, len(neg_pool), size=n_neg)]
        else:
            neg = pos_pool[rng.integers(0, len(pos_pool), size=n_neg)]
        sel = np.concatenate([pos, neg])
        plan.proposals.append(prop[sel])
        sel_labels = labels[sel]
        plan.roi_labels.append(sel_labels)
        reg_t = np.zeros((len(sel), 4), np.float32)
        fg = np.where(sel_labels > 0)[0]
        if len(fg):
            reg_t[fg] = B.encode_deltas(gt_boxes[best_gt[sel[fg]]], prop[sel[fg]])
        plan.roi_reg_targets.append(reg_t)
    return plan


def build_train_plan(model: ModelState, images: np.ndarray, targets,
                     rng: np.random.Generator) -> TrainPlan:
    """Forward the current model (without mutating it) and freeze the
    anchor/proposal sampling for a step. targets: per image (boxes, labels);
    empty target lists are allowed and yield pure-background sampling."""
    arch = model.arch
    feats, _, _ = _backbone_forward(model, images, mode="collect")
    obj_map, delta_map, _, _, _ = _rpn_forward(model, feats)
    obj_flat = _flatten_rpn(arch, obj_map, 2)
    delta_flat = _flatten_rpn(arch, delta_map, 4)
    return _plan_from_outputs(arch, generate_anchors(arch), obj_flat, delta_flat,
                              targets, rng)


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------

def _roi_head_forward(model: ModelState, feats: np.ndarray, proposals,
                      need_indices: bool = True):
    arch = model.arch
    p = model.params
    pooled_parts, scatter = [], []
    for i, props in enumerate(proposals):
        boxes = np.asarray(props, np.float64).reshape(-1, 4) / arch.feature_stride
        if len(boxes) == 0:
            scatter.append(None)
            continue
        pooled, yy, xx = _roi_pool_batch(feats[i], boxes, arch.roi_pool_size,
                                         need_indices)
        pooled_parts.append(pooled)
        scatter.append((yy, xx, len(boxes)))
    pooled = np.concatenate(pooled_parts) if pooled_parts else np.zeros(
        (0, arch.channels[-1], arch.roi_pool_size, arch.roi_pool_size), feats.dtype)
    flat = pooled.reshape(len(pooled), -1)
    h1_pre = linear_forward(flat, p["roi.fc1.w"], p["roi.fc1.b"])
    h1 = relu_forward(h1_pre)
    h2_pre = linear_forward(h1, p["roi.fc2.w"], p["roi.fc2.b"])
    h2 = relu_forward(h2_pre)
    cls_logits = linear_forward(h2, p["roi.cls.w"], p["roi.cls.b"])
    deltas = linear_forward(h2, p["roi.delta.w"], p["roi.delta.b"])
    cache = {"flat": flat, "h1_pre": h1_pre, "h1": h1, "h2_pre": h2_pre,
             "h2": h2, "scatter": scatter}
    return cls_logits, deltas, cache


def _compute_losses(obj_flat, delta_flat, cls_logits, roi_deltas, plan,
                    include_reg: bool):
    """LossBreakdown plus upstream gradients for each head output."""
    n_img = obj_flat.shape[0]
    sel_logits = np.concatenate(
        [obj_flat[i][plan.rpn_idx[i]] for i in range(n_img)], axis=0)
    sel_targets = np.concatenate(plan.rpn_cls)
    rpn_cls, dsel = softmax_cross_entropy(sel_logits, sel_targets)
    dobj = np.zeros_like(obj_flat)
    off = 0
    for i in range(n_img):
        k = len(plan.rpn_idx[i])
        dobj[i][plan.rpn_idx[i]] = dsel[off:off + k]
        off += k

    ddelta = np.zeros_like(delta_flat)
    n_rpn_pos = sum(len(ix) for ix in plan.rpn_pos_idx)
    if include_reg and n_rpn_pos > 0:
        diffs = np.concatenate(
            [delta_flat[i][plan.rpn_pos_idx[i]] - plan.rpn_reg_targets[i]
             for i in range(n_img)], axis=0)
        rpn_reg, ddiffs = smooth_l1(diffs)
        off = 0
        for i in range(n_img):
            k = len(plan.rpn_pos_idx[i])
            ddelta[i][plan.rpn_pos_idx[i]] = ddiffs[off:off + k]
            off += k
    else:
        rpn_reg = 0.0

    labels = np.concatenate(plan.roi_labels)
    roi_cls, dcls = softmax_cross_entropy(cls_logits, labels)

    droi_delta = np.zeros_like(roi_deltas)
    fg = np.where(labels > 0)[0]
    if include_reg and len(fg) > 0:
        reg_targets = np.concatenate(plan.roi_reg_targets)[fg]
        cols = (labels[fg] - 1)[:, None] * 4 + np.arange(4)[None, :]
        pred = roi_deltas[fg[:, None], cols]
        roi_reg, dd = smooth_l1(pred - reg_targets)
        droi_delta[fg[:, None], cols] = dd
    else:
        roi_reg = 0.0

    loss = LossBreakdown(float(rpn_cls), float(rpn_reg), float(roi_cls), float(roi_reg))
    return loss, dobj, ddelta, dcls, droi_delta


def _forward_all(model: ModelState, images: np.ndarray, mode: str):
    arch = model.arch
    feats, bb_caches, _ = _backbone_forward(model, images, mode=mode)
    obj_map, delta_map, hidden_pre, hidden, rpn_cols = _rpn_forward(model, feats)
    return {
        "feats": feats, "bb_caches": bb_caches,
        "hidden_pre": hidden_pre, "hidden": hidden, "rpn_cols": rpn_cols,
        "obj_flat": _flatten_rpn(arch, obj_map, 2),
        "delta_flat": _flatten_rpn(arch, delta_map, 4),
    }


def _finish(model: ModelState, images: np.ndarray, fw: dict, plan: TrainPlan,
            include_reg: bool, want_grads: bool):
    """ROI head forward, losses and (optionally) the full backward pass."""
    arch = model.arch
    feats = fw["feats"]
    cls_logits, roi_deltas, roi_cache = _roi_head_forward(model, feats, plan.proposals)
    loss, dobj, ddelta, dcls, droi_delta = _compute_losses(
        fw["obj_flat"], fw["delta_flat"], cls_logits, roi_deltas, plan, include_reg)
    if not want_grads:
        return loss, None

    p = model.params
    grads = {}
    # ROI head backward
    dh2 = dcls @ p["roi.cls.w"].T + droi_delta @ p["roi.delta.w"].T
    grads["roi.cls.w"] = roi_cache["h2"].T @ dcls
    grads["roi.cls.b"] = dcls.sum(axis=0)
    grads["roi.delta.w"] = roi_cache["h2"].T @ droi_delta
    grads["roi.delta.b"] = droi_delta.sum(axis=0)
    dh2 = relu_backward(dh2, roi_cache["h2_pre"])
    dh1, dw, db = linear_backward(dh2, roi_cache["h1"], p["roi.fc2.w"])
    grads["roi.fc2.w"], grads["roi.fc2.b"] = dw, db
    dh1 = relu_backward(dh1, roi_cache["h1_pre"])
    dflat, dw, db = linear_backward(dh1, roi_cache["flat"], p["roi.fc1.w"])
    grads["roi.fc1.w"], grads["roi.fc1.b"] = dw, db

    dfeats = np.zeros_like(feats)
    dpooled = dflat.reshape(-1, arch.channels[-1], arch.roi_pool_size,
                            arch.roi_pool_size)
    c, fh, fw_ = feats.shape[1:]
    row = 0
    for i, info in enumerate(roi_cache["scatter"]):
        if info is None:
            continue
        yy, xx, count = info
        dfeats[i] += _roi_scatter_batch(dpooled[row:row + count], yy, xx, c, fh, fw_)
        row += count

    # RPN backward
    dobj_map = _unflatten_rpn(arch, dobj, 2)
    ddelta_map = _unflatten_rpn(arch, ddelta, 4)
    dh, dw, db = conv2d_backward(dobj_map, fw["hidden"], p["rpn.obj.w"], 1, 0)
    grads["rpn.obj.w"], grads["rpn.obj.b"] = dw, db
    dh_d, dw, db = conv2d_backward(ddelta_map, fw["hidden"], p["rpn.delta.w"], 1, 0)
    grads["rpn.delta.w"], grads["rpn.delta.b"] = dw, db
    dh = relu_backward(dh + dh_d, fw["hidden_pre"])
    dfeats_rpn, dw, db = conv2d_backward(dh, feats, p["rpn.conv.w"], 1, 1,
                                         cols=fw["rpn_cols"])
    grads["rpn.conv.w"], grads["rpn.conv.b"] = dw, db
    dfeats += dfeats_rpn

    _backbone_backward(model, fw["bb_caches"], dfeats, grads)
    grads = {k: np.asarray(v, images.dtype) for k, v in grads.items()}
    return loss, grads


def training_loss(model: ModelState, images: np.ndarray, plan: TrainPlan,
                  include_reg: bool = True) -> LossBreakdown:
    """Loss of a frozen plan without gradients or model mutation (batch
    statistics are used but not folded into the running estimates)."""
    fw = _forward_all(model, images, "collect")
    loss, _ = _finish(model, images, fw, plan, include_reg, False)
    return loss


def forward_train_with_plan(model: ModelState, images: np.ndarray, plan: TrainPlan,
                            include_reg: bool = True):
    """Loss and gradients of a frozen plan, without model mutation."""
    fw = _forward_all(model, images, "collect")
    return _finish(model, images, fw, plan, include_reg, True)


def forward_train(model: ModelState, images: np.ndarray, targets,
                  rng: np.random.Generator, include_reg: bool = True):
    """One supervised forward/backward pass.

    Samples anchors/proposals with rng, mutates the model's BN running
    statistics (train-mode forward) and returns (LossBreakdown, gradients
    by parameter name). Raises NumericsError on a non-finite loss.
    """
    fw = _forward_all(model, images, "train")
    plan = _plan_from_outputs(model.arch, generate_anchors(model.arch),
                              fw["obj_flat"], fw["delta_flat"], targets, rng)
    loss, grads = _finish(model, images, fw, plan, include_reg, True)
    if not np.isfinite(loss.total):
        raise NumericsError(f"non-finite training loss: {loss}")
    return loss, grads


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def forward_inference_batch(model: ModelState, images, score_floor: float = 0.05,
                            nms_iou: float = 0.5, max_dets: int = 50,
                            stats_mode: str = "eval"):
    """Detect objects in a list of HWC images; one Detections per image.

    Per-image results are identical to single-image calls: every stage is
    either elementwise or an independent per-image/per-row matrix product.
    """
    arch = model.arch
    x = images_to_batch(images)
    feats, _, _ = _backbone_forward(model, x, mode=stats_mode)
    obj_map, delta_map, _, _, _ = _rpn_forward(model, feats)
    obj_flat = _flatten_rpn(arch, obj_map, 2)
    delta_flat = _flatten_rpn(arch, delta_map, 4)
    anchors = generate_anchors(arch)
    proposals = [
        _propose(arch, anchors, obj_flat[i], delta_flat[i])[0]
        for i in range(len(images))
    ]
    cls_logits, roi_deltas, _ = _roi_head_forward(model, feats, proposals,
                                                  need_indices=False)
    z = cls_logits - cls_logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)

    results = []
    row = 0
    for props in proposals:
        n = len(props)
        if n == 0:
            results.append(B.Detections())
            continue
        pr = probs[row:row + n]
        dl = roi_deltas[row:row + n]
        row += n
        parts = []
        for c in range(arch.num_classes):
            scores = pr[:, c + 1]
            boxes = B.decode_deltas(dl[:, 4 * c:4 * c + 4], props)
            boxes = B.clip_boxes(boxes, arch.input_size, arch.input_size)
            ok = ((boxes[:, 2] - boxes[:, 0] > 1e-3)
                  & (boxes[:, 3] - boxes[:, 1] > 1e-3)
                  & (scores >= score_floor))
            parts.append((boxes[ok], np.full(int(ok.sum()), c, np.int64),
                          scores[ok].astype(np.float32)))
        dets = B.Detections(np.concatenate([b for b, _, _ in parts]),
                            np.concatenate([l for _, l, _ in parts]),
                            np.concatenate([s for _, _, s in parts]))
        results.append(B.nms(dets, nms_iou)[:max_dets])
    return results


def forward_inference(model: ModelState, image, score_floor: float = 0.05,
                      nms_iou: float = 0.5, max_dets: int = 50,
                      stats_mode: str = "eval") -> B.Detections:
    """Detect objects in one HWC image.

    stats_mode 'eval' normalizes with the stored running BN statistics;
    'collect' uses the statistics of the submitted batch (never written
    back). Deterministic given (model, image, settings).
    """
    return forward_inference_batch(model, [image], score_floor, nms_iou,
                                   max_dets, stats_mode)[0]
