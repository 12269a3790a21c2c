"""Set-based supervision: Hungarian matching under the weighted
classification + regression cost, focal and L1 losses, the dense class
heatmap with penalty-reduced focal loss, and per-decoder-layer losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .config import RunConfig
from .geometry import BevGridSpec, Box3D, encode_box
from .nn import Adam  # noqa: F401  (optimizer lives with the supervision code)
from .queries import DetectionSet
from .tensor import Tensor

_P_CLAMP = 1e-6


@dataclass
class MatchResult:
    pairs: list          # (prediction index, gt index)
    unmatched_preds: np.ndarray


def hungarian(cost: np.ndarray) -> MatchResult:
    """Exact min-cost one-to-one assignment of min(n, m) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    if cost.size == 0:
        return MatchResult([], np.arange(cost.shape[0], dtype=np.intp))
    rows, cols = kernels.lsap(cost)
    matched = set(int(r) for r in rows)
    unmatched = np.array([i for i in range(cost.shape[0]) if i not in matched], dtype=np.intp)
    return MatchResult(list(zip(rows.tolist(), cols.tolist())), unmatched)


def focal_loss(p: float, y: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Scalar focal loss with clamped probability."""
    p = min(max(p, _P_CLAMP), 1.0 - _P_CLAMP)
    if y == 1:
        return -alpha * (1.0 - p) ** gamma * np.log(p)
    return -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)


def _pow(x: Tensor, gamma: float) -> Tensor:
    if gamma == 2.0:
        return x * x
    return T.exp(T.log(x) * gamma)


def focal_loss_matrix(scores: Tensor, targets: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Elementwise sigmoid focal loss summed over an (N, K) score tensor."""
    y = np.asarray(targets, dtype=np.float64)
    p = T.clip(scores, _P_CLAMP, 1.0 - _P_CLAMP)
    pos = Tensor(y) * (-alpha) * _pow(1.0 - p, gamma) * T.log(p)
    neg = Tensor(1.0 - y) * (-(1.0 - alpha)) * _pow(p, gamma) * T.log(1.0 - p)
    return T.tsum(pos + neg)


def penalty_reduced_focal(shat: Tensor, s: np.ndarray, gamma: float = 2.0,
                          beta: float = 4.0) -> Tensor:
    """CenterNet-style heatmap loss, normalized by the number of peak cells."""
    s = np.asarray(s, dtype=np.float64)
    pos = (s >= 1.0).astype(np.float64)
    p = T.clip(shat, _P_CLAMP, 1.0 - _P_CLAMP)
    pos_term = Tensor(pos) * (-1.0) * _pow(1.0 - p, gamma) * T.log(p)
    neg_w = (1.0 - s) ** beta * (1.0 - pos)
    neg_term = Tensor(neg_w) * (-1.0) * _pow(p, gamma) * T.log(1.0 - p)
    n_pos = max(1.0, pos.sum())
    return T.tsum(pos_term + neg_term) * (1.0 / n_pos)


def gaussian_radius(extent_cells: tuple, min_overlap: float = 0.1) -> float:
    """CornerNet/CenterPoint radius such that a corner shifted by r keeps at
    least min_overlap IoU with the original footprint."""
    h, w = extent_cells
    a1 = 1.0
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + np.sqrt(b1 * b1 - 4 * a1 * c1)) / 2
    a2 = 4.0
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + np.sqrt(b2 * b2 - 4 * a2 * c2)) / 2
    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + np.sqrt(b3 * b3 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def build_gt_heatmap(gt_boxes, spec: BevGridSpec, k_classes: int,
                     min_overlap: float = 0.1, min_radius: int = 2) -> np.ndarray:
    """Per-class Gaussian center heatmap, shape (ny, nx, K).

    Each box splats exp(-r^2 / (2 sigma^2)) with sigma = radius / 3 around its
    center cell; overlapping splats combine by elementwise max.
    """
    hm = np.zeros((spec.ny, spec.nx, k_classes))
    px, py = spec.pitch
    for box in gt_boxes:
        w, l, _ = box.size
        radius = gaussian_radius((l / py, w / px), min_overlap)
        radius = max(min_radius, int(radius))
        sigma = radius / 3.0
        cx = int(np.floor((box.center[0] - spec.x_range[0]) / px))
        cy = int(np.floor((box.center[1] - spec.y_range[0]) / py))
        if not (0 <= cx < spec.nx and 0 <= cy < spec.ny):
            continue
        x0, x1 = max(0, cx - radius), min(spec.nx - 1, cx + radius)
        y0, y1 = max(0, cy - radius), min(spec.ny - 1, cy + radius)
        xs = np.arange(x0, x1 + 1) - cx
        ys = np.arange(y0, y1 + 1) - cy
        g = np.exp(-(xs[None, :] ** 2 + ys[:, None] ** 2) / (2.0 * sigma * sigma))
        patch = hm[y0 : y1 + 1, x0 : x1 + 1, box.class_id]
        np.maximum(patch, g, out=patch)
    return hm


def match_cost_matrix(det: DetectionSet, gt_boxes, cfg: RunConfig) -> np.ndarray:
    """Per-pair cost: lambda_cls * focal(p-hat of gt class, y=1) +
    lambda_reg * L1 in the regression space, gt encoded against the
    prediction's own anchor."""
    n = len(det)
    m = len(gt_boxes)
    cost = np.zeros((n, m))
    scores = np.clip(det.cls_scores.data, _P_CLAMP, 1.0 - _P_CLAMP)
    a, g = cfg.focal_alpha, cfg.focal_gamma
    for j, gt in enumerate(gt_boxes):
        p = scores[:, gt.class_id]
        cls_cost = -a * (1.0 - p) ** g * np.log(p)
        targets = np.stack([encode_box(gt, det.anchors[i]) for i in range(n)])
        reg_cost = np.abs(det.reg.data - targets).sum(axis=1)
        cost[:, j] = cfg.lambda_cls * cls_cost + cfg.lambda_reg * reg_cost
    return cost


def match_cost(pred_scores: np.ndarray, pred_reg: np.ndarray, anchor, gt: Box3D,
               cfg: RunConfig) -> float:
    """Single-pair matching cost (the vectorized matrix is used in practice)."""
    p = float(np.clip(pred_scores[gt.class_id], _P_CLAMP, 1.0 - _P_CLAMP))
    cls_cost = focal_loss(p, 1, cfg.focal_alpha, cfg.focal_gamma)
    reg_cost = float(np.abs(pred_reg - encode_box(gt, anchor)).sum())
    return cfg.lambda_cls * cls_cost + cfg.lambda_reg * reg_cost


def _set_loss(det: DetectionSet, gt_boxes, cfg: RunConfig):
    """Hungarian-matched focal + L1 for one prediction set.

    Returns (cls_loss, reg_loss, MatchResult). Unmatched predictions receive
    background focal on all classes. When the detection set carries learnable
    anchors, the center part of the regression target is built from them so
    gradients can move the anchors.
    """
    n, k = det.cls_scores.data.shape
    if len(gt_boxes) == 0:
        cls = focal_loss_matrix(det.cls_scores, np.zeros((n, k)), cfg.focal_alpha,
                                cfg.focal_gamma)
        return cls, Tensor(0.0), MatchResult([], np.arange(n, dtype=np.intp))
    cost = match_cost_matrix(det, gt_boxes, cfg)
    match = hungarian(cost)
    n_match = max(1, len(match.pairs))

    targets_cls = np.zeros((n, k))
    pred_idx = np.array([p for p, _ in match.pairs], dtype=np.intp)
    gt_idx = np.array([g for _, g in match.pairs], dtype=np.intp)
    for p, g in match.pairs:
        targets_cls[p, gt_boxes[g].class_id] = 1.0
    cls = focal_loss_matrix(det.cls_scores, targets_cls, cfg.focal_alpha,
                            cfg.focal_gamma) * (1.0 / n_match)

    reg_targets = np.stack(
        [encode_box(gt_boxes[g], det.anchors[p]) for p, g in match.pairs]
    )
    pred_rows = T.gather_rows(det.reg, pred_idx)
    if det.anchor_tensor is not None:
        gt_centers = np.stack([gt_boxes[g].center for g in gt_idx])
        center_target = Tensor(gt_centers) - T.gather_rows(det.anchor_tensor, pred_idx)
        rest_target = Tensor(reg_targets[:, 3:])
        diff = T.concat(
            [T.slice_cols(pred_rows, 0, 3) - center_target,
             T.slice_cols(pred_rows, 3, 8) - rest_target],
            axis=1,
        )
    else:
        diff = pred_rows - Tensor(reg_targets)
    reg = T.tsum(T.absolute(diff)) * (1.0 / n_match)
    return cls, reg, match


def total_loss(dense_det: DetectionSet | None, layer_dets, gt_boxes,
               grid: BevGridSpec, cfg: RunConfig):
    """Full training loss: dense-stage matched loss, dense heatmap loss, and
    per-decoder-layer matched losses. Returns (loss tensor, breakdown)."""
    breakdown = {}
    total = Tensor(0.0)
    if dense_det is not None:
        cls, reg, _ = _set_loss(dense_det, gt_boxes, cfg)
        dense_term = cls * cfg.lambda_cls + reg * cfg.lambda_reg
        total = total + dense_term
        breakdown["dense_cls"] = cls.item()
        breakdown["dense_reg"] = reg.item()
        if cfg.use_heatmap_loss:
            shat = T.reshape(dense_det.cls_scores, (grid.ny, grid.nx, cfg.num_classes))
            s = build_gt_heatmap(gt_boxes, grid, cfg.num_classes)
            hm = penalty_reduced_focal(shat, s, cfg.prf_gamma, cfg.prf_beta)
            total = total + hm * cfg.heatmap_weight
            breakdown["heatmap"] = hm.item()
    for li, det in enumerate(layer_dets):
        cls, reg, _ = _set_loss(det, gt_boxes, cfg)
        term = (cls * cfg.lambda_cls + reg * cfg.lambda_reg) * cfg.layer_loss_weight
        total = total + term
        breakdown[f"layer{li}_cls"] = cls.item()
        breakdown[f"layer{li}_reg"] = reg.item()
    breakdown["total"] = total.item()
    return total, breakdown
