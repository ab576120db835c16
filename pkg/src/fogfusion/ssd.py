"""Anchors, target assignment, detection losses and decoding for the single-shot head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, custom_op

NEGATIVE, IGNORE = 0, -1


@dataclass(frozen=True)
class AnchorConfig:
    scale_min: float = 0.08
    scale_max: float = 0.8
    aspect_ratios: tuple[float, ...] = (1.0, 0.5, 2.0)  # width / height

    @property
    def per_cell(self) -> int:
        return len(self.aspect_ratios)


@dataclass(frozen=True)
class AnchorTarget:
    labels: np.ndarray  # [N] class index, 0 negative, -1 ignore
    matched: np.ndarray  # [N] matched ground-truth index or -1
    regression: np.ndarray  # [N, 4]


@dataclass(frozen=True)
class Detection:
    cls: int
    score: float
    box: tuple[float, float, float, float]


class AnchorSet:
    """Anchor boxes over a feature pyramid, flattened level by level, cell-major."""

    def __init__(self, shapes: list[tuple[int, int]], image_size: tuple[int, int], cfg: AnchorConfig | None = None):
        self.cfg = cfg or AnchorConfig()
        self.shapes = [tuple(s) for s in shapes]
        self.image_size = tuple(image_size)  # (H, W)
        H, W = self.image_size
        n_lv = len(self.shapes)
        scales = np.linspace(self.cfg.scale_min, self.cfg.scale_max, n_lv) * H
        boxes, levels = [], []
        for l, (h, w) in enumerate(self.shapes):
            cy = (np.arange(h) + 0.5) * H / h
            cx = (np.arange(w) + 0.5) * W / w
            CY, CX = np.meshgrid(cy, cx, indexing="ij")
            ar = np.asarray(self.cfg.aspect_ratios)
            aw = scales[l] * np.sqrt(ar)
            ah = scales[l] / np.sqrt(ar)
            ctr = np.stack([CX.ravel(), CY.ravel()], axis=1)  # cell-major
            cxs = np.repeat(ctr[:, 0], len(ar))
            cys = np.repeat(ctr[:, 1], len(ar))
            ws = np.tile(aw, len(ctr))
            hs = np.tile(ah, len(ctr))
            boxes.append(np.stack([cxs - ws / 2, cys - hs / 2, cxs + ws / 2, cys + hs / 2], axis=1))
            levels.append(np.full(len(cxs), l))
        self.boxes = np.concatenate(boxes)
        self.level = np.concatenate(levels)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def centers(self) -> np.ndarray:
        return np.stack([(self.boxes[:, 0] + self.boxes[:, 2]) / 2, (self.boxes[:, 1] + self.boxes[:, 3]) / 2], axis=1)


# ---------------------------------------------------------------------------
# geometry


def iou(a, b) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Regression targets ``(dcx / w_a, dcy / h_a, log(w / w_a), log(h / h_a))``."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    return np.stack([
        ((gt[:, 0] + gt[:, 2]) - (anchors[:, 0] + anchors[:, 2])) / 2 / aw,
        ((gt[:, 1] + gt[:, 3]) - (anchors[:, 1] + anchors[:, 3])) / 2 / ah,
        np.log(gw / aw),
        np.log(gh / ah),
    ], axis=1)


def decode_boxes(reg: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    cx = (anchors[:, 0] + anchors[:, 2]) / 2 + reg[:, 0] * aw
    cy = (anchors[:, 1] + anchors[:, 3]) / 2 + reg[:, 1] * ah
    w = aw * np.exp(np.clip(reg[:, 2], -10, 10))
    h = ah * np.exp(np.clip(reg[:, 3], -10, 10))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def match_anchors(anchors: AnchorSet | np.ndarray, gts, threshold: float = 0.5, gt_classes=None,
                  ignore=None) -> AnchorTarget:
    """Assign each anchor to a ground truth.

    Positive when the best IoU reaches ``threshold``; each (non-ignored) ground
    truth's single best anchor is forced positive as well. Anchors whose best
    match is an ``ignore`` ground truth get label -1; everything else is
    negative.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    n = len(boxes)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    reg = np.zeros((n, 4), dtype=np.float32)
    if len(gts) == 0:
        return AnchorTarget(labels, matched, reg)
    cls = np.ones(len(gts), dtype=np.int64) if gt_classes is None else np.asarray(gt_classes, dtype=np.int64)
    ign = np.zeros(len(gts), dtype=bool) if ignore is None else np.asarray(ignore, dtype=bool)
    ious = iou_matrix(boxes, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    pos = best_iou >= threshold
    matched[pos] = best_gt[pos]
    for g in range(len(gts)):
        if ign[g]:
            continue
        matched[int(ious[:, g].argmax())] = g
    has = matched >= 0
    labels[has] = cls[matched[has]]
    ignored = has & ign[np.maximum(matched, 0)]
    labels[ignored] = IGNORE
    pos = labels > 0
    if pos.any():
        reg[pos] = encode_boxes(gts[matched[pos]], boxes[pos]).astype(np.float32)
    return AnchorTarget(labels, matched, reg)


# ---------------------------------------------------------------------------
# losses


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def hard_negative_mask(neg_loss: np.ndarray, labels: np.ndarray, ratio: float = 5) -> np.ndarray:
    """Per image, keep the ``min(ratio * #pos, #neg)`` highest-loss negatives."""
    neg_loss = np.atleast_2d(neg_loss)
    labels = np.atleast_2d(labels)
    keep = np.zeros(labels.shape, dtype=bool)
    for i in range(labels.shape[0]):
        neg = np.flatnonzero(labels[i] == NEGATIVE)
        k = min(int(ratio * int((labels[i] > 0).sum())), len(neg))
        if k <= 0:
            continue
        order = np.argsort(-neg_loss[i, neg], kind="stable")[:k]
        keep[i, neg[order]] = True
    return keep


def classification_loss(logits: Tensor, labels: np.ndarray, mining_ratio: float = 5) -> Tensor:
    """Softmax cross-entropy over positives and mined hard negatives, normalised by #positives.

    ``logits`` is ``[B, N, K]`` (or ``[N, K]``), ``labels`` ``[B, N]`` with -1 for ignore.
    """
    z = logits.data
    lab = np.asarray(labels)
    if z.ndim == 2:
        z = z[None]
        lab = lab[None]
    B, N, K = z.shape
    if lab.shape != (B, N):
        raise ValueError(f"labels shape {lab.shape} does not match logits {z.shape}")
    logp = _log_softmax(z.astype(np.float64))
    safe = np.maximum(lab, 0)
    ce = -np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    pos = lab > 0
    sel = pos | hard_negative_mask(ce, lab, mining_ratio)
    norm = max(1, int(pos.sum()))
    value = float((ce * sel).sum()) / norm

    def _bw(g: np.ndarray) -> None:
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        grad = (p - onehot) * sel[..., None] * (float(g) / norm)
        logits._accumulate(grad.reshape(logits.shape).astype(logits.data.dtype))

    return custom_op(np.asarray(value, dtype=logits.data.dtype), (logits,), _bw)


def huber(x) -> np.ndarray:
    """Elementwise Huber penalty: ``x^2 / 2`` for ``|x| <= 1``, ``|x| - 0.5`` beyond."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(a <= 1.0, 0.5 * a * a, a - 0.5)


def huber_loss(pred: Tensor, target: np.ndarray, positive: np.ndarray) -> Tensor:
    """Huber penalty of ``pred - target`` summed over positive anchors, divided by #positives."""
    x = pred.data.astype(np.float64) - np.asarray(target, dtype=np.float64)
    mask = np.asarray(positive, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ValueError(f"positive mask shape {mask.shape} does not match {x.shape[:-1]}")
    norm = max(1, int(mask.sum()))
    value = float((huber(x) * mask[..., None]).sum()) / norm

    def _bw(g: np.ndarray) -> None:
        d = np.clip(x, -1.0, 1.0) * mask[..., None] * (float(g) / norm)
        pred._accumulate(d.astype(pred.data.dtype))

    return custom_op(np.asarray(value, dtype=pred.data.dtype), (pred,), _bw)


# ---------------------------------------------------------------------------
# inference


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in descending score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes = np.asarray(boxes, dtype=np.float64)
    keep = []
    while len(order):
        i = order[0]
        keep.append(i)
        if len(order) == 1:
            break
        ov = iou_matrix(boxes[i][None], boxes[order[1:]])[0]
        order = order[1:][ov < iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(z, dtype=np.float64)))


def decode_and_nms(logits: np.ndarray, regressions: np.ndarray, anchors: AnchorSet | np.ndarray,
                   score_thresh: float = 0.05, nms_iou: float = 0.5, max_det: int = 100,
                   image_size: tuple[int, int] | None = None, pre_nms_top_k: int | None = None) -> list[Detection]:
    """Turn raw head outputs of one image into scored, clamped, de-duplicated boxes."""
    boxes_a = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    if image_size is None and isinstance(anchors, AnchorSet):
        image_size = anchors.image_size
    probs = softmax(np.asarray(logits))
    boxes = decode_boxes(np.asarray(regressions, dtype=np.float64), boxes_a)
    if image_size is not None:
        H, W = image_size
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, W)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, H)
    dets: list[Detection] = []
    for c in range(1, probs.shape[1]):
        sc = probs[:, c]
        idx = np.flatnonzero(sc > score_thresh)
        valid = (boxes[idx, 2] > boxes[idx, 0]) & (boxes[idx, 3] > boxes[idx, 1])
        idx = idx[valid]
        if pre_nms_top_k is not None and len(idx) > pre_nms_top_k:
            idx = idx[np.argsort(-sc[idx], kind="stable")[:pre_nms_top_k]]
        if not len(idx):
            continue
        keep = nms(boxes[idx], sc[idx], nms_iou)
        dets.extend(Detection(c, float(sc[idx[k]]), tuple(float(v) for v in boxes[idx[k]])) for k in keep)
    dets.sort(key=lambda d: -d.score)
    return dets[:max_det]
