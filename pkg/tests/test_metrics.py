import numpy as np
import pytest

from _toys import tiny_siamese
from prunekit.metrics import SUCCESS_THRESHOLDS, precision_curve, success_auc, success_curve
from prunekit.synthetic import clip_box, crop, make_sequence, run_smoke
from prunekit.tracker import BBox, iou


def boxes(rng, n):
    return [BBox(*rng.uniform(0, 100, 2), *rng.uniform(5, 40, 2)) for _ in range(n)]


def test_perfect_tracker():
    gt = boxes(np.random.default_rng(0), 12)
    p20, curve = precision_curve(gt, gt)
    assert p20 == 1.0 and np.all(curve == 1.0)
    assert success_auc(gt, gt) == pytest.approx(20 / 21)


def test_threshold_edge():
    gt = boxes(np.random.default_rng(1), 8)
    pred = [BBox(g.cx + 15, g.cy + 20, g.w, g.h) for g in gt]  # 25 px away
    p20, curve = precision_curve(pred, gt)
    assert p20 == 0.0
    assert curve[24] == 0.0 and curve[25] == 1.0


def test_precision_counting_oracle():
    rng = np.random.default_rng(2)
    gt = boxes(rng, 50)
    pred = [BBox(g.cx + dx, g.cy + dy, g.w, g.h) for g, (dx, dy) in zip(gt, rng.normal(0, 20, (50, 2)))]
    _, curve = precision_curve(pred, gt)
    for th in range(51):
        hits = 0
        for p, g in zip(pred, gt):
            if ((p.cx - g.cx) ** 2 + (p.cy - g.cy) ** 2) ** 0.5 <= th:
                hits += 1
        assert curve[th] == hits / 50


def test_zero_overlap():
    gt = [BBox(10, 10, 5, 5)] * 4
    pred = [BBox(100, 100, 5, 5)] * 4
    assert np.all(success_curve(pred, gt)[1:] == 0)
    assert success_auc(pred, gt) == 0.0


def test_auc_double_loop_oracle():
    rng = np.random.default_rng(3)
    gt = boxes(rng, 40)
    pred = [BBox(g.cx + dx, g.cy + dy, g.w * s, g.h) for g, dx, dy, s in
            zip(gt, rng.normal(0, 8, 40), rng.normal(0, 8, 40), rng.uniform(0.5, 1.5, 40))]
    total = 0.0
    for t in SUCCESS_THRESHOLDS:
        total += sum(1 for p, g in zip(pred, gt) if iou(p, g) > t) / 40
    assert success_auc(pred, gt) == pytest.approx(total / 21, abs=1e-15)


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    gt, pred = boxes(rng, 30), boxes(rng, 30)
    perm = rng.permutation(30)
    assert precision_curve(pred, gt)[0] == precision_curve([pred[i] for i in perm], [gt[i] for i in perm])[0]
    assert success_auc(pred, gt) == pytest.approx(success_auc([pred[i] for i in perm], [gt[i] for i in perm]))


def test_bad_sequences():
    with pytest.raises(ValueError):
        precision_curve([], [])
    with pytest.raises(ValueError):
        success_auc([BBox(1, 1, 1, 1)], [])


# ---------------------------------------------------------------------------
# synthetic harness


def test_sequence_keeps_target_inside():
    seq = make_sequence(60, seed=1, frame_size=120, target_size=20, speed=6)
    for f, b in zip(seq.frames, seq.boxes):
        x0, y0, x1, y1 = b.corners()
        assert 0 <= x0 and x1 <= 120 and 0 <= y0 and y1 <= 120
        assert np.isfinite(f).all()


def test_crop_pads_with_mean():
    frame = np.random.default_rng(5).random((3, 10, 10), dtype=np.float32)
    out = crop(frame, 0, 0, 5)
    assert out.shape == (1, 3, 5, 5)
    np.testing.assert_array_equal(out[0, :, 2:, 2:], frame[:, :3, :3])
    np.testing.assert_allclose(out[0, :, 0, 0], frame.mean(axis=(1, 2)))


def test_clip_box():
    b = clip_box(BBox(-10, 5, 30, 4), 50, 40)
    x0, y0, x1, y1 = b.corners()
    assert x0 == 0 and x1 == 5 and y0 == 3 and y1 == 7


def test_smoke_contract_and_determinism():
    m = tiny_siamese(0)
    a = run_smoke(m, n_frames=6, seed=3)
    b = run_smoke(m, n_frames=6, seed=3)
    assert a.boxes_inside_frame()
    assert all(np.isfinite(s) for s in a.scores)
    assert a.boxes == b.boxes and a.scores == b.scores
    assert 0 <= a.precision20 <= 1 and 0 <= a.auc <= 1
