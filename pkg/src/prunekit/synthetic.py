"""Synthetic tracking sequences and the smoke-run loop used by the CLI."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from prunekit.metrics import precision_curve, success_auc
from prunekit.model_ir import ModelGraph
from prunekit.tracker import BBox, SiamTracker


@dataclass
class Sequence:
    frames: list[np.ndarray]  # each (3, H, W) float32
    boxes: list[BBox]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].shape[1:]


def make_sequence(n_frames: int, seed: int, frame_size: int, target_size: int, speed: float = 3.0) -> Sequence:
    """A textured square drifting over a noisy background, bouncing off the borders."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    background = rng.random((3, frame_size, frame_size), dtype=np.float32) * 0.5
    cells = rng.random((3, 4, 4), dtype=np.float32)
    texture = np.kron(cells, np.ones((1, (target_size + 3) // 4, (target_size + 3) // 4), np.float32))
    texture = 0.5 + 0.5 * texture[:, :target_size, :target_size]
    half = target_size / 2
    pos = np.array([frame_size / 2, frame_size / 2], dtype=np.float64)
    angle = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.cos(angle), np.sin(angle)])
    lo, hi = half + 1, frame_size - half - 1
    frames, boxes = [], []
    for _ in range(n_frames):
        frame = background + rng.normal(0, 0.02, background.shape).astype(np.float32)
        x0 = int(round(pos[0] - half))
        y0 = int(round(pos[1] - half))
        frame[:, y0:y0 + target_size, x0:x0 + target_size] = texture
        frames.append(np.clip(frame, 0, 1))
        boxes.append(BBox(x0 + half, y0 + half, float(target_size), float(target_size)))
        pos += vel + rng.normal(0, 0.5, 2)
        for k in range(2):
            if pos[k] < lo or pos[k] > hi:
                vel[k] = -vel[k]
                pos[k] = np.clip(pos[k], lo, hi)
    return Sequence(frames, boxes)


def crop(frame: np.ndarray, cx: float, cy: float, size: int) -> np.ndarray:
    """size x size patch centred on (cx, cy), padded with the frame mean; shape (1, 3, size, size)."""
    c, h, w = frame.shape
    x0 = int(round(cx - (size - 1) / 2))
    y0 = int(round(cy - (size - 1) / 2))
    out = np.empty((c, size, size), dtype=np.float32)
    out[:] = frame.mean(axis=(1, 2), keepdims=True)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[:, sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = frame[:, sy0:sy1, sx0:sx1]
    return out[None]


def clip_box(box: BBox, width: int, height: int) -> BBox:
    x0, y0, x1, y1 = box.corners()
    x0, x1 = np.clip([x0, x1], 0, width)
    y0, y1 = np.clip([y0, y1], 0, height)
    if x1 - x0 < 1:
        x0, x1 = (min(x0, width - 1.0), min(x0, width - 1.0) + 1.0)
    if y1 - y0 < 1:
        y0, y1 = (min(y0, height - 1.0), min(y0, height - 1.0) + 1.0)
    return BBox.from_ltrb(float(x0), float(y0), float(x1), float(y1))


@dataclass
class SmokeResult:
    boxes: list[BBox]
    gt: list[BBox]
    scores: list[float]
    score_maps: list[np.ndarray]
    frame_seconds: list[float] = field(default_factory=list)
    reference_maps: list[np.ndarray] | None = None
    frame_size: tuple[int, int] | None = None  # (height, width)

    def boxes_inside_frame(self) -> bool:
        h, w = self.frame_size
        eps = 1e-9
        return all(
            b.corners()[0] >= -eps and b.corners()[1] >= -eps and b.corners()[2] <= w + eps and b.corners()[3] <= h + eps
            for b in self.boxes
        )

    @property
    def precision20(self) -> float:
        return precision_curve(self.boxes, self.gt)[0]

    @property
    def auc(self) -> float:
        return success_auc(self.boxes, self.gt)

    def score_correlation(self) -> float | None:
        """Pearson r between this model's score maps and the reference model's."""
        if not self.reference_maps:
            return None
        a = np.concatenate([m.ravel() for m in self.score_maps])
        b = np.concatenate([m.ravel() for m in self.reference_maps])
        if a.std() == 0 or b.std() == 0:
            return float("nan")
        return float(np.corrcoef(a, b)[0, 1])


def default_sequence(model: ModelGraph, n_frames: int, seed: int) -> Sequence:
    z, x = model.meta.template_size, model.meta.search_size
    return make_sequence(n_frames, seed, frame_size=x + z // 2, target_size=max(8, z // 2))


def run_smoke(model: ModelGraph, n_frames: int = 20, seed: int = 0, reference: ModelGraph | None = None,
              sequence: Sequence | None = None) -> SmokeResult:
    """Track a synthetic sequence; the first frame's box is given, the rest are predicted.

    If ``reference`` is given it sees the same search crops, so its score
    maps can be compared cell by cell.
    """
    seq = sequence or default_sequence(model, n_frames, seed)
    height, width = seq.size
    z, x = model.meta.template_size, model.meta.search_size
    trackers = [SiamTracker(model)] + ([SiamTracker(reference)] if reference is not None else [])
    first = seq.boxes[0]
    template = crop(seq.frames[0], first.cx, first.cy, z)
    for t in trackers:
        t.init(template)

    boxes, scores, maps, ref_maps, secs = [first], [1.0], [], [], []
    prev = first
    centre = (x - 1) / 2
    for frame in seq.frames[1:]:
        search = crop(frame, prev.cx, prev.cy, x)
        t0 = time.perf_counter()
        box, head = trackers[0].step(search)
        secs.append(time.perf_counter() - t0)
        score = head.score()
        if reference is not None:
            ref_maps.append(trackers[1].step(search)[1].score())
        moved = BBox(prev.cx + box.cx - centre, prev.cy + box.cy - centre, box.w, box.h)
        prev = clip_box(moved, width, height)
        boxes.append(prev)
        scores.append(float(score.max()))
        maps.append(score)
    return SmokeResult(boxes, list(seq.boxes), scores, maps, secs, ref_maps if reference is not None else None,
                       (height, width))
