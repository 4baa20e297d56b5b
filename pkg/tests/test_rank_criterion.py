import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _toys import soft_overlap_check, with_weights
from prunekit.errors import CalibrationError, NonPrunableLayerError, PlanError, ZeroChannelError
from prunekit.model_ir import IMAGE, LayerSpec, ModelGraph, build_reference_model, infer_shapes, init_weights
from prunekit.rank_criterion import (
    CalibrationConfig,
    PrunePlan,
    RankReport,
    calibrate_ranks,
    keep_count,
    keep_from_prune,
    make_plan,
    paper_preset_ratios,
    plan_objective,
    read_report,
    write_report,
)
from prunekit.tensor_core import conv2d, matrix_rank, relu


def report_of(ranks, prunable=None):
    ranks = {k: np.asarray(v, dtype=np.float64) for k, v in ranks.items()}
    return RankReport(ranks, 1, 1e-5, frozenset(ranks if prunable is None else prunable))


def toy(seed=0):
    layers = [
        LayerSpec("a", "conv", 3, 6, "backbone", (IMAGE,), 3, 1, 1, prunable=True),
        LayerSpec("ra", "relu", 6, 6, "backbone", ("a",)),
        LayerSpec("b", "conv", 6, 4, "backbone", ("ra",), 3, 1, 0, prunable=True),
    ]
    return ModelGraph(layers, init_weights(layers, seed))


def brute_force_min(ranks, keep):
    n = len(ranks)
    return min(sum(ranks[j] for j in range(n) if j not in kept) for kept in itertools.combinations(range(n), keep))


# ---------------------------------------------------------------------------
# make_plan


def test_sort_case():
    plan = make_plan(report_of({"L": [3, 1, 2]}), {"L": 2 / 3})
    assert list(plan.kept("L")) == [0, 2]
    assert plan.n_pruned("L") == 1


def test_tie_rule():
    plan = make_plan(report_of({"L": [5, 5, 5, 5]}), {"L": 0.5})
    assert list(plan.kept("L")) == [0, 1]


def test_rounding_half_up():
    assert keep_count(0.5, 5) == 3
    assert keep_count(0.25, 2) == 1
    assert keep_count(0.792, 96) == 76
    assert keep_count(1.0, 7) == 7


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31), st.floats(0.05, 1.0))
def test_plan_is_optimal(n, seed, ratio):
    rng = np.random.default_rng(seed)
    ranks = rng.integers(0, 5, n) + rng.random(n) * (rng.random() < 0.5)
    keep = keep_count(ratio, n)
    if keep < 1:
        with pytest.raises(ZeroChannelError):
            make_plan(report_of({"L": ranks}), {"L": ratio})
        return
    rep = report_of({"L": ranks})
    plan = make_plan(rep, {"L": ratio})
    assert plan.n_kept("L") == keep
    assert plan_objective(rep, plan) == pytest.approx(brute_force_min(list(ranks), keep), abs=1e-12)
    kept, pruned = ranks[plan.masks["L"]], ranks[~plan.masks["L"]]
    if len(pruned):
        assert kept.min() >= pruned.max()


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**31))
def test_keep_sets_nest(n, seed):
    rng = np.random.default_rng(seed)
    rep = report_of({"L": rng.integers(0, 4, n).astype(float)})
    prev = None
    for r in np.linspace(0.05, 1.0, 12):
        if keep_count(r, n) < 1:
            continue
        kept = set(make_plan(rep, {"L": r}).kept("L"))
        if prev is not None:
            assert prev <= kept
        prev = kept


def test_plan_errors():
    rep = report_of({"a": [1, 2], "neck": [1, 1]}, prunable={"a"})
    with pytest.raises(PlanError):
        make_plan(rep, {"a": 1.0, "ghost": 0.5})
    with pytest.raises(PlanError):
        make_plan(rep, {})
    with pytest.raises(ZeroChannelError):
        make_plan(rep, {"a": 0.2})
    with pytest.raises(NonPrunableLayerError):
        make_plan(rep, {"a": 1.0, "neck": 0.5})
    assert "neck" not in make_plan(rep, {"a": 1.0, "neck": 1.0}).masks


def test_plan_json_round_trip():
    plan = make_plan(report_of({"a": [1, 3, 2, 0], "b": [2, 2]}), {"a": 0.5, "b": 1.0})
    back = PrunePlan.from_json(plan.to_json())
    for lid in plan.masks:
        np.testing.assert_array_equal(back.masks[lid], plan.masks[lid])


def test_prune_ratio_complement():
    assert keep_from_prune({"x": 0.3}) == {"x": pytest.approx(0.7)}


def test_preset_mapping():
    m = build_reference_model(1.0)
    r = paper_preset_ratios(m)
    assert [r[f"backbone.conv{i}"] for i in range(1, 6)] == [0.792, 0.875, 0.878, 0.870, 1.0]
    assert [r[f"head_cls.conv{i}"] for i in range(1, 4)] == [0.898, 0.539, 0.875]
    assert [r[f"head_reg.conv{i}"] for i in range(1, 4)] == [0.887, 0.566, 0.875]
    assert all(v == 1.0 for k, v in r.items() if k.startswith("neck."))
    rep = report_of({l: np.zeros(m.layer(l).out_channels) for l in m.conv_ids}, m.prunable_ids)
    assert make_plan(rep, r).n_pruned("backbone.conv5") == 0
    with pytest.raises(PlanError):
        paper_preset_ratios(toy())


# ---------------------------------------------------------------------------
# calibration


def test_zero_filter_has_rank_zero():
    m = toy(1)
    w = np.array(m.weights["a"]["weight"])
    b = np.array(m.weights["a"]["bias"])
    w[2], b[2] = 0, 0
    m = with_weights(m, {("a", "weight"): w, ("a", "bias"): b})
    rep = calibrate_ranks(m, CalibrationConfig(batch_size=3, input_hw=(8, 8)))
    assert rep.ranks["a"][2] == 0
    assert np.all(np.delete(rep.ranks["a"], 2) > 0)


def test_identity_filter_full_rank():
    layers = [LayerSpec("id", "conv", 3, 1, "backbone", (IMAGE,), 1, 1, 0, prunable=True)]
    w = np.zeros((1, 3, 1, 1), np.float32)
    w[0, 1] = 1
    m = ModelGraph(layers, {"id": {"weight": w, "bias": np.zeros(1, np.float32)}})
    rep = calibrate_ranks(m, CalibrationConfig(batch_size=1, input_hw=(7, 5)))
    assert rep.ranks["id"][0] == 5


def test_matches_independent_recomputation():
    m = toy(2)
    cfg = CalibrationConfig(batch_size=4, seed=11, input_hw=(9, 9))
    rep = calibrate_ranks(m, cfg)
    rng = np.random.default_rng(11)
    a, b = m.weights["a"], m.weights["b"]
    sums = {"a": np.zeros(6), "b": np.zeros(4)}
    for _ in range(4):
        x = rng.random((1, 3, 9, 9), dtype=np.float32)
        ya = conv2d(x, a["weight"], a["bias"], 1, 1)
        yb = conv2d(relu(ya), b["weight"], b["bias"], 1, 0)
        for lid, y in (("a", ya), ("b", yb)):
            sums[lid] += [matrix_rank(y[0, j]) for j in range(y.shape[1])]
    for lid in sums:
        np.testing.assert_array_equal(rep.ranks[lid], sums[lid] / 4)


def test_rank_bounds_and_order():
    m = build_reference_model(0.05)
    rep = calibrate_ranks(m, CalibrationConfig(batch_size=2))
    shapes = infer_shapes(m)
    for lid, r in rep.ranks.items():
        branch = m.layer(lid).branch
        _, h, w = shapes["search" if branch == "shared" else branch][lid]
        assert np.all((0 <= r) & (r <= min(h, w)))
        o = rep.order(lid)
        assert np.all(np.diff(r[o]) <= 0)
    assert rep.prunable == frozenset(m.prunable_ids)


def test_scale_invariance():
    m = toy(3)
    cfg = CalibrationConfig(batch_size=2, input_hw=(8, 8))
    base = calibrate_ranks(m, cfg)
    scaled = with_weights(m, {("a", "weight"): m.weights["a"]["weight"] * 7.5,
                              ("a", "bias"): m.weights["a"]["bias"] * 7.5})
    rep = calibrate_ranks(scaled, cfg)
    ratios = {"a": 0.5, "b": 0.5}
    np.testing.assert_array_equal(make_plan(base, ratios).masks["a"], make_plan(rep, ratios).masks["a"])


def test_threads_do_not_change_report():
    m = build_reference_model(0.05)
    a = calibrate_ranks(m, CalibrationConfig(batch_size=3, threads=1))
    b = calibrate_ranks(m, CalibrationConfig(batch_size=3, threads=3))
    for lid in a.ranks:
        assert a.ranks[lid].tobytes() == b.ranks[lid].tobytes()


def test_seed_stability_soft():
    # keep-sets at the preset ratios should barely depend on the noise draw
    m = build_reference_model(0.25)
    r1 = calibrate_ranks(m, CalibrationConfig(batch_size=4, seed=0))
    r2 = calibrate_ranks(m, CalibrationConfig(batch_size=4, seed=1))
    ratios = paper_preset_ratios(m)
    soft_overlap_check(make_plan(r1, ratios), make_plan(r2, ratios))


def test_report_round_trip(tmp_path):
    m = toy(4)
    rep = calibrate_ranks(m, CalibrationConfig(batch_size=3, input_hw=(8, 8)))
    back = read_report(write_report(rep, tmp_path / "r.csv"))
    assert back.g == 3 and back.rel_tol == rep.rel_tol and back.prunable == rep.prunable
    for lid in rep.ranks:
        assert back.ranks[lid].tobytes() == rep.ranks[lid].tobytes()


def test_report_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_report(tmp_path / "none.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("# schema_version=9\nlayer,filter,avg_rank,prunable\n")
    with pytest.raises(ValueError):
        read_report(bad)


def test_image_folder(tmp_path):
    from PIL import Image

    rng = np.random.default_rng(0)
    for i in range(2):
        Image.fromarray(rng.integers(0, 255, (40, 50, 3), dtype=np.uint8)).save(tmp_path / f"{i}.png")
    cfg = CalibrationConfig(batch_size=4, input_source="image-folder", image_folder=str(tmp_path), input_hw=(12, 12))
    rep = calibrate_ranks(toy(5), cfg)
    assert rep.g == 2
    with pytest.raises(CalibrationError):
        calibrate_ranks(toy(5), CalibrationConfig(input_source="image-folder", image_folder=str(tmp_path / "x")))
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(CalibrationError):
        calibrate_ranks(toy(5), CalibrationConfig(input_source="image-folder", image_folder=str(empty),
                                                  input_hw=(8, 8)))


def test_config_validation():
    with pytest.raises(ValueError):
        CalibrationConfig(batch_size=0)
    with pytest.raises(ValueError):
        CalibrationConfig(input_source="webcam")
