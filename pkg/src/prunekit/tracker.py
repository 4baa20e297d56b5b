"""Siamese tracking pipeline: head decoding, track step, label maps and losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from prunekit import engine
from prunekit.model_ir import ModelGraph

REG_CLIP = 16.0  # raw regression outputs are clamped to +-REG_CLIP before exp


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w} h={self.h}")

    @classmethod
    def from_ltrb(cls, x0, y0, x1, y1):
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class HeadMaps:
    """Raw head outputs for one search image.

    ``cls`` and ``quality`` are logits of shape (1, 1, s, s); ``reg`` holds
    raw (left, top, right, bottom) regressions of shape (1, 4, s, s) that
    :func:`decode_reg` turns into pixel distances.
    """

    cls: np.ndarray
    quality: np.ndarray
    reg: np.ndarray
    stride: int = 8

    def __post_init__(self):
        s = self.cls.shape[-2:]
        if self.quality.shape[-2:] != s or self.reg.shape[-2:] != s:
            raise ValueError("cls, quality and reg maps must share their spatial extent")
        if self.reg.shape[-3] != 4:
            raise ValueError(f"reg map needs 4 channels, got {self.reg.shape[-3]}")

    @property
    def size(self) -> int:
        return self.cls.shape[-1]

    def ltrb(self) -> np.ndarray:
        return decode_reg(self.reg, self.stride)

    def score(self) -> np.ndarray:
        """sigmoid(cls) * sigmoid(quality) as a (s, s) float64 map."""
        return np.exp(log_sigmoid(self.cls) + log_sigmoid(self.quality)).reshape(self.cls.shape[-2:])


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LabelMaps:
    """Targets on the score grid: ``p_star`` in {0,1}, ``q_star`` in [0,1], ``t_star`` (4, s, s) ltrb pixels."""

    p_star: np.ndarray
    q_star: np.ndarray
    t_star: np.ndarray

    @property
    def n_pos(self) -> int:
        return int((self.p_star > 0).sum())


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def sigmoid(x):
    return np.exp(log_sigmoid(x))


def decode_reg(raw, stride):
    return stride * np.exp(np.clip(raw, -REG_CLIP, REG_CLIP))


def score_offset(search_size: int, score_size: int, stride: int) -> float:
    """Search-image coordinate of score cell (0, 0)."""
    return (search_size - 1 - (score_size - 1) * stride) / 2


def cell_points(search_size, score_size, stride):
    off = score_offset(search_size, score_size, stride)
    return off + stride * np.arange(score_size, dtype=np.float64)


def box_at(ltrb, x, y) -> BBox:
    l, t, r, b = (float(v) for v in ltrb)
    return BBox(x + (r - l) / 2, y + (b - t) / 2, l + r, t + b)


def select(maps: HeadMaps, search_size: int) -> tuple[BBox, float, tuple[int, int]]:
    """Best cell of the reweighted score map and its decoded box (search-image pixels)."""
    score = maps.score()
    i, j = np.unravel_index(np.argmax(score), score.shape)
    pts = cell_points(search_size, maps.size, maps.stride)
    ltrb = maps.ltrb()[0, :, i, j]
    return box_at(ltrb, pts[j], pts[i]), float(score[i, j]), (int(i), int(j))


def track_step(model: ModelGraph, template, search) -> tuple[BBox, HeadMaps]:
    """Run both branches, couple, apply heads, pick the best reweighted cell."""
    cls, quality, reg = engine.forward(model, template, search)
    maps = HeadMaps(cls, quality, reg, model.meta.total_stride)
    box, _, _ = select(maps, model.meta.search_size)
    return box, maps


class SiamTracker:
    """Stateful tracker that embeds the template once and reuses it."""

    def __init__(self, model: ModelGraph):
        self.model = model
        self._template_env = None

    def init(self, template):
        self._template_env = engine.run(self.model, {"template": template})["template"]

    def step(self, search) -> tuple[BBox, HeadMaps]:
        if self._template_env is None:
            raise RuntimeError("call init() with a template first")
        model = self.model
        env_x = engine.run(model, {"search": search})["search"]
        env = {l.id: self._template_env[l.id] for l in model.layers if l.branch == "template"}
        env.update({l.id: env_x[l.id] for l in model.layers if l.branch == "search"})
        joint = [l for l in model.layers if l.branch == "joint"]
        for layer in joint:
            env[layer.id] = engine.apply_layer(model, layer, [env[i] for i in layer.inputs])
        roles = model.meta.outputs
        maps = HeadMaps(env[roles["cls"]], env[roles["quality"]], env[roles["reg"]], model.meta.total_stride)
        box, _, _ = select(maps, model.meta.search_size)
        return box, maps


# ---------------------------------------------------------------------------
# labels


def make_labels(gt: BBox, search_size: int, score_size: int, stride: int, shrink: float = 0.5) -> LabelMaps:
    """Harness label assignment for a ground-truth box in search-image pixels.

    A cell is positive when its image point lies inside ``gt`` shrunk about
    its centre by ``shrink``. Regression targets are distances from the
    point to the box edges; quality targets are the centre-ness
    sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)).
    """
    pts = cell_points(search_size, score_size, stride)
    ys, xs = np.meshgrid(pts, pts, indexing="ij")
    x0, y0, x1, y1 = gt.corners()
    t_star = np.stack([xs - x0, ys - y0, x1 - xs, y1 - ys])
    hw, hh = shrink * gt.w / 2, shrink * gt.h / 2
    inside = (np.abs(xs - gt.cx) <= hw) & (np.abs(ys - gt.cy) <= hh) & (t_star.min(axis=0) > 0)
    p_star = inside.astype(np.float64)
    l, t, r, b = np.maximum(t_star, 1e-12)
    ctr = np.sqrt(np.minimum(l, r) / np.maximum(l, r) * np.minimum(t, b) / np.maximum(t, b))
    q_star = np.where(inside, ctr, 0.0)
    return LabelMaps(p_star, q_star, t_star)


# ---------------------------------------------------------------------------
# losses


def _ltrb_iou(pred, target):
    """Intersection/union of boxes given as distances from a shared anchor point."""
    pl, pt, pr, pb = pred
    tl, tt, tr, tb = target
    iw = np.minimum(pl, tl) + np.minimum(pr, tr)
    ih = np.minimum(pt, tt) + np.minimum(pb, tb)
    inter = iw * ih
    pa = (pl + pr) * (pt + pb)
    ta = (tl + tr) * (tt + tb)
    union = pa + ta - inter
    return inter, union, iw, ih


def total_loss(maps: HeadMaps, labels: LabelMaps, w: LossWeights = LossWeights()):
    """Focal + quality BCE + (-ln IoU) loss averaged over positive cells.

    Returns ``(loss, grads)`` where ``grads`` holds d loss / d raw map value
    for ``cls``, ``quality`` and ``reg`` with the maps' shapes. Computation
    runs in float64 regardless of input dtype. With no positive cells the
    divisor is 1 and only the classification term remains.
    """
    cls = np.asarray(maps.cls, dtype=np.float64)
    qual = np.asarray(maps.quality, dtype=np.float64)
    reg = np.asarray(maps.reg, dtype=np.float64)
    for name, arr in (("cls", cls), ("quality", qual), ("reg", reg)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name} map")
    s = maps.size
    x = cls.reshape(s, s)
    qx = qual.reshape(s, s)
    rx = reg.reshape(4, s, s)
    pos = labels.p_star > 0
    p_star = pos.astype(np.float64)
    n_pos = int(pos.sum())
    norm = max(n_pos, 1)
    a, g = w.focal_alpha, w.focal_gamma

    # focal loss on p = sigmoid(x), written with log-sigmoids for stability
    lp, lq = log_sigmoid(x), log_sigmoid(-x)  # ln p, ln(1-p)
    p, q1 = np.exp(lp), np.exp(lq)
    pos_term = -a * q1**g * lp
    neg_term = -(1 - a) * p**g * lq
    focal = np.where(pos, pos_term, neg_term)
    # d/dx: dp/dx = p(1-p)
    d_pos = -a * (-g * q1**g * p * lp + q1**g * q1)
    d_neg = -(1 - a) * (g * p**g * q1 * lq - p**g * p)
    g_cls = np.where(pos, d_pos, d_neg)

    # quality BCE on sigmoid(qx)
    qs = labels.q_star
    bce = -(qs * log_sigmoid(qx) + (1 - qs) * log_sigmoid(-qx))
    g_q = sigmoid(qx) - qs

    # IoU loss on decoded distances
    clipped = np.abs(rx) < REG_CLIP
    d = decode_reg(rx, maps.stride)
    t = np.where(pos, labels.t_star, 1.0)
    inter, union, iw, ih = _ltrb_iou(d, t)
    iou_loss = np.where(pos, np.log(union) - np.log(inter), 0.0)
    # d/d(distance) of ln(union) - ln(inter); union = pred + target - inter
    g_reg = np.zeros_like(rx)
    for k in range(4):
        horizontal = k in (0, 2)
        d_inter = (d[k] < t[k]) * (ih if horizontal else iw)
        d_area = (d[1] + d[3]) if horizontal else (d[0] + d[2])
        g_reg[k] = ((d_area - d_inter) / union - d_inter / inter) * d[k] * clipped[k]

    total = focal.sum() + (p_star * (w.lambda1 * bce + w.lambda2 * iou_loss)).sum()
    loss = total / norm
    grads = {
        "cls": (g_cls / norm).reshape(maps.cls.shape),
        "quality": (w.lambda1 * p_star * g_q / norm).reshape(maps.quality.shape),
        "reg": (w.lambda2 * p_star[None] * g_reg / norm).reshape(maps.reg.shape),
    }
    return float(loss), grads


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    # rounding can push identical boxes a hair above 1
    return min(1.0, inter / union) if union > 0 else 0.0
