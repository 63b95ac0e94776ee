"""Feature fusion, box head, decoding and the training loss.

Boxes are ``(cx, cy, w, h)`` normalised to the search crop.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError
from .nn import Linear, Module
from .tensor import parameter, trunc_normal


class Conv3x3(Module):
    """Same-padding 3x3 convolution on channels-last maps, via im2col."""

    def __init__(self, rng, c_in, c_out):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.weight = parameter(trunc_normal(rng, (9 * c_in, c_out)))
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x):
        if x.shape[-1] != self.c_in:
            raise ContractError(f"conv expects {self.c_in} channels, got {x.shape[-1]}")
        return T.matmul(T.im2col3x3(x), self.weight) + self.bias


class Branch(Module):
    def __init__(self, rng, dim, out):
        super().__init__()
        self.conv = Conv3x3(rng, dim, dim)
        self.point = Linear(rng, dim, out)

    def __call__(self, x):
        return self.point(T.relu(self.conv(x)))


class Head(Module):
    def __init__(self, rng, dim):
        super().__init__()
        self.fuse = Conv3x3(rng, 2 * dim, dim)
        self.cls = Branch(rng, dim, 1)
        self.offset = Branch(rng, dim, 2)
        self.size = Branch(rng, dim, 2)


@dataclass
class HeadOutput:
    cls_logit: T.Tensor  # [B, H, W]
    cls: T.Tensor  # sigmoid(cls_logit)
    offset: T.Tensor  # [B, H, W, 2], (x, y) in cells from the cell centre
    size: T.Tensor  # [B, H, W, 2], (w, h) in (0, 1)


def fuse_and_predict(feat_rgb, feat_tir, head):
    if feat_rgb.shape != feat_tir.shape:
        raise ContractError(f"feature maps differ: {feat_rgb.shape} vs {feat_tir.shape}")
    x = T.relu(head.fuse(T.concat([feat_rgb, feat_tir], axis=-1)))
    logit = head.cls(x)
    logit = T.reshape(logit, logit.shape[:-1])
    return HeadOutput(logit, T.sigmoid(logit), head.offset(x), T.sigmoid(head.size(x)))


# -- decoding --------------------------------------------------------------

def decode_arrays(cls, offset, size, window=None):
    """Argmax decode of one ``[H, W]`` score map; ties go to the first cell row-major."""
    cls = np.asarray(cls)
    h, w = cls.shape
    pick = cls if window is None else cls * window
    flat = int(np.argmax(pick))
    i, j = divmod(flat, w)
    cx = (j + 0.5 + offset[i, j, 0]) / w
    cy = (i + 0.5 + offset[i, j, 1]) / h
    box = np.array([cx, cy, size[i, j, 0], size[i, j, 1]], dtype=np.float64)
    return box, float(cls[i, j])


def decode(out, index=0, window=None):
    """Best box and its score for batch entry ``index``."""
    return decode_arrays(out.cls.data[index], out.offset.data[index], out.size.data[index], window)


def encode(box, grid):
    """HeadOutput arrays that decode exactly to ``box`` (single peak)."""
    cx, cy, w, h = box
    i = min(int(np.floor(cy * grid)), grid - 1)
    j = min(int(np.floor(cx * grid)), grid - 1)
    cls = np.zeros((grid, grid))
    cls[i, j] = 1.0
    offset = np.zeros((grid, grid, 2))
    offset[i, j] = (cx * grid - j - 0.5, cy * grid - i - 0.5)
    size = np.full((grid, grid, 2), 0.5)
    size[i, j] = (w, h)
    return cls, offset, size


def hann2d(n):
    win = np.hanning(n + 2)[1:-1]
    return np.outer(win, win)


# -- geometry --------------------------------------------------------------

def giou_np(a, b):
    """Generalised IoU of ``(cx, cy, w, h)`` boxes, broadcasting over leading axes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ax1, ay1 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax2, ay2 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx1, by1 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    bx2, by2 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    enclose = (np.maximum(ax2, bx2) - np.minimum(ax1, bx1)) * (np.maximum(ay2, by2) - np.minimum(ay1, by1))
    return inter / union - (enclose - union) / enclose


def giou(a, b):
    """Differentiable GIoU; ``a`` and ``b`` are Tensors ``[..., 4]``."""
    def corners(t):
        cx, cy, w, h = (t[..., k] for k in range(4))
        return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5, w * h
    ax1, ay1, ax2, ay2, area_a = corners(a)
    bx1, by1, bx2, by2, area_b = corners(b)
    iw = T.relu(T.minimum(ax2, bx2) - T.maximum(ax1, bx1))
    ih = T.relu(T.minimum(ay2, by2) - T.maximum(ay1, by1))
    inter = iw * ih
    union = area_a + area_b - inter
    enclose = (T.maximum(ax2, bx2) - T.minimum(ax1, bx1)) * (T.maximum(ay2, by2) - T.minimum(ay1, by1))
    return inter / union - (enclose - union) / enclose


# -- loss ------------------------------------------------------------------

def gt_cells(gt, grid):
    gt = np.asarray(gt)
    i = np.clip(np.floor(gt[..., 1] * grid), 0, grid - 1).astype(np.int64)
    j = np.clip(np.floor(gt[..., 0] * grid), 0, grid - 1).astype(np.int64)
    return i, j


def gaussian_target(gt, grid, sigma_factor=1 / 6, min_sigma=0.5):
    """Soft classification target ``[B, grid, grid]``, exactly 1 at the gt cell.

    Sigma in cells is ``sigma_factor`` times the box extent in cells, per axis.
    """
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    i, j = gt_cells(gt, grid)
    ys = np.arange(grid)[None, :, None]
    xs = np.arange(grid)[None, None, :]
    sx = np.maximum(gt[:, 2] * grid * sigma_factor, min_sigma)[:, None, None]
    sy = np.maximum(gt[:, 3] * grid * sigma_factor, min_sigma)[:, None, None]
    return np.exp(-((xs - j[:, None, None]) ** 2) / (2 * sx ** 2)
                  - ((ys - i[:, None, None]) ** 2) / (2 * sy ** 2))


def focal_loss(logit, target):
    """Soft-target focal loss (gamma = 2): (t - p)^2 * BCE(p, t), normalised by sum(t).

    Non-negative, and zero exactly when p == t everywhere.
    """
    t = np.asarray(target, dtype=np.float64)
    p = T.sigmoid(logit)
    bce = T.softplus(-logit) * t + T.softplus(logit) * (1.0 - t)
    diff = p - t
    return (diff * diff * bce).sum() * (1.0 / max(1.0, float(t.sum())))


def check_boxes(gt):
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if gt.shape[-1] != 4 or not np.all(np.isfinite(gt)) or np.any(gt[:, 2:] <= 0):
        raise DataError(f"degenerate ground-truth box(es): {gt.tolist()}")
    return gt


def boxes_at(out, cells):
    """Predicted ``(cx, cy, w, h)`` Tensor ``[B, 4]`` read at the given cells."""
    i, j = cells
    grid_h, grid_w = out.cls.shape[-2:]
    b = np.arange(len(i))
    off = out.offset[b, i, j]
    size = out.size[b, i, j]
    base = np.stack([(j + 0.5) / grid_w, (i + 0.5) / grid_h], axis=-1)
    centre = off * np.array([1.0 / grid_w, 1.0 / grid_h]) + base
    return T.concat([centre, size], axis=-1)


@dataclass
class LossParts:
    total: T.Tensor
    cls: T.Tensor
    iou: T.Tensor
    l1: T.Tensor

    def floats(self):
        return tuple(float(x.data) for x in (self.total, self.cls, self.iou, self.l1))


def loss(out, gt, lambda_giou=2.0, lambda_l1=5.0):
    """cls + lambda_giou * (1 - GIoU) + lambda_l1 * L1, averaged over the batch."""
    gt = check_boxes(gt)
    grid = out.cls.shape[-1]
    target = gaussian_target(gt, grid)
    l_cls = focal_loss(out.cls_logit, target)
    pred = boxes_at(out, gt_cells(gt, grid))
    gtt = T.Tensor(gt)
    l_iou = (1.0 - giou(pred, gtt)).mean()
    l_1 = T.tabs(pred - gtt).mean()
    total = l_cls + l_iou * lambda_giou + l_1 * lambda_l1
    return LossParts(total, l_cls, l_iou, l_1)
