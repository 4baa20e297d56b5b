import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _toys import chain_model, random_pair, tiny_siamese
from prunekit import engine
from prunekit.errors import BlobShapeMismatchError, GraphError, ManifestError, TruncatedBlobError
from prunekit.model_ir import (
    IMAGE,
    LayerSpec,
    ModelGraph,
    build_reference_model,
    init_weights,
    mac_count,
    model_hash,
    param_count,
    structurally_equal,
    validate,
)
from prunekit.serialize import load_model, save_model


@pytest.fixture(scope="module")
def reference():
    return build_reference_model(1.0, seed=0)


def single_conv(cin=3, cout=8, k=3):
    layers = [LayerSpec("c", "conv", cin, cout, "backbone", (IMAGE,), k, 1, 0, prunable=True)]
    return ModelGraph(layers, init_weights(layers))


def test_param_count_examples():
    assert param_count(single_conv()) == 224
    assert param_count(ModelGraph((), {})) == 0


def test_mac_count_examples():
    m = single_conv(1, 1, 1)
    assert mac_count(m, (4, 4)) == 16
    assert mac_count(single_conv(1, 2, 1), (4, 4)) == 32


def test_reference_size_and_channel_plan(reference):
    assert param_count(reference) == 9_654_022
    assert 0.95 <= param_count(reference) / 9.66e6 <= 1.05
    widths = {lid: reference.layer(lid).out_channels for lid in reference.conv_ids}
    assert [widths[f"backbone.conv{i}"] for i in range(1, 6)] == [96, 256, 384, 384, 256]
    assert reference.meta.score_size == 17
    assert reference.meta.total_stride == 8
    assert not any(reference.layer(l).prunable for l in reference.conv_ids if l.startswith("neck."))


def test_reference_macs_match_layer_table(reference):
    # hand-derived output extents for 127 / 303 inputs
    search = {"backbone.conv1": 147, "backbone.conv2": 69, "backbone.conv3": 32, "backbone.conv4": 30,
              "backbone.conv5": 28}
    template = {"backbone.conv1": 59, "backbone.conv2": 25, "backbone.conv3": 10, "backbone.conv4": 8,
                "backbone.conv5": 6}
    total = 0
    for lid in search:
        l = reference.layer(lid)
        per_px = l.out_channels * l.in_channels * l.kernel**2
        total += per_px * (search[lid] ** 2 + template[lid] ** 2)
    for task in ("cls", "reg"):
        z, x = reference.layer(f"neck.{task}_z"), reference.layer(f"neck.{task}_x")
        total += z.out_channels * z.in_channels * 9 * 4**2
        total += x.out_channels * x.in_channels * 9 * 26**2
        for j, side in zip((1, 2, 3), (21, 19, 17)):
            c = reference.layer(f"head_{task}.conv{j}")
            total += c.out_channels * c.in_channels * 9 * side**2
    total += (1 + 1 + 4) * 256 * 17**2
    assert mac_count(reference) == total


def test_scale_too_small():
    with pytest.raises(ValueError):
        build_reference_model(0.001)
    with pytest.raises(ValueError):
        build_reference_model(0.0)


@pytest.mark.parametrize("scale", [0.05, 0.1, 0.25, 0.5])
def test_scaled_models_validate(scale):
    m = build_reference_model(scale, seed=3)
    validate(m)
    assert m.meta.score_size == 17


def test_weights_are_read_only(reference):
    w = reference.weights["backbone.conv1"]["weight"]
    with pytest.raises(ValueError):
        w[0, 0, 0, 0] = 1.0
    with pytest.raises(TypeError):
        reference.weights["x"] = {}


# ---------------------------------------------------------------------------
# validator


CORRUPTIONS = ["in_channels", "out_channels", "kind", "section", "input", "duplicate", "weight_shape",
               "branch", "nan"]


def corrupt(model, how, idx):
    layers = list(model.layers)
    weights = {k: dict(v) for k, v in model.weights.items()}
    convs = [i for i, l in enumerate(layers) if l.kind == "conv"]
    i = idx % len(layers)
    l = layers[i]
    if how == "in_channels":
        layers[i] = l.replace(in_channels=l.in_channels + 1)
    elif how == "out_channels":
        layers[i] = l.replace(out_channels=l.out_channels + 1)
    elif how == "kind":
        layers[i] = l.replace(kind="dense")
    elif how == "section":
        layers[i] = l.replace(section="tail")
    elif how == "input":
        layers[i] = l.replace(inputs=("nowhere",) + l.inputs[1:])
    elif how == "duplicate":
        j = (i + 1) % len(layers)
        layers[j] = layers[j].replace(id=l.id) if j != i else l.replace(id=IMAGE)
    elif how == "weight_shape":
        c = layers[convs[idx % len(convs)]]
        weights[c.id]["bias"] = np.zeros(c.out_channels + 1, np.float32)
    elif how == "branch":
        layers[i] = l.replace(branch="sideways")
    elif how == "nan":
        c = layers[convs[idx % len(convs)]]
        w = np.array(weights[c.id]["weight"])
        w.flat[0] = np.nan
        weights[c.id]["weight"] = w
    return ModelGraph(tuple(layers), weights, model.meta)


@settings(max_examples=80, deadline=None)
@given(st.sampled_from(CORRUPTIONS), st.integers(0, 10_000), st.booleans())
def test_validator_rejects_corruption(how, idx, siamese):
    model = SMALL_SIAMESE if siamese else chain_model(np.random.default_rng(idx), depth=3)
    validate(model)
    with pytest.raises(GraphError):
        validate(corrupt(model, how, idx))


SMALL_SIAMESE = build_reference_model(0.05, seed=1)


def test_validator_siamese_rules():
    m = SMALL_SIAMESE
    bad = [l.replace(prunable=True) if l.id == "neck.cls_x" else l for l in m.layers]
    with pytest.raises(GraphError, match="neck"):
        validate(ModelGraph(tuple(bad), m.weights, m.meta))
    bad = [l.replace(branch="search") if l.id == "backbone.conv3" else l for l in m.layers]
    with pytest.raises(GraphError):
        validate(ModelGraph(tuple(bad), m.weights, m.meta))


def test_validator_rejects_mismatched_head_sizes():
    m = SMALL_SIAMESE
    layers = [l.replace(kernel=3) if l.id == "head_reg.offset" else l for l in m.layers]
    weights = {k: dict(v) for k, v in m.weights.items()}
    w = m.weights["head_reg.offset"]["weight"]
    weights["head_reg.offset"]["weight"] = np.zeros(w.shape[:2] + (3, 3), np.float32)
    with pytest.raises(GraphError, match="differ in size"):
        validate(ModelGraph(tuple(layers), weights, m.meta))


# ---------------------------------------------------------------------------
# serialization


def test_round_trip_bit_identical(tmp_path, reference):
    save_model(reference, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert structurally_equal(reference, back)
    for lid, params in reference.weights.items():
        for name, arr in params.items():
            assert back.weights[lid][name].tobytes() == arr.tobytes()
    assert model_hash(back) == model_hash(reference)


def test_round_trip_forward(tmp_path):
    m = tiny_siamese(2)
    save_model(m, tmp_path / "m")
    back = load_model(tmp_path / "m")
    z, x = random_pair(m, np.random.default_rng(0))
    for a, b in zip(engine.forward(m, z, x), engine.forward(back, z, x)):
        np.testing.assert_array_equal(a, b)


def test_save_is_deterministic(tmp_path):
    for name in ("a", "b"):
        save_model(build_reference_model(0.1, seed=5), tmp_path / name)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def _edit_manifest(path, fn):
    mpath = path / "manifest.json"
    data = json.loads(mpath.read_text())
    fn(data)
    mpath.write_text(json.dumps(data))


def test_declared_channels_disagree_with_blob(tmp_path):
    layers = [LayerSpec("c", "conv", 3, 4, "backbone", (IMAGE,), 3, 1, 0, prunable=True)]
    save_model(ModelGraph(layers, init_weights(layers)), tmp_path)

    def widen(d):
        d["layers"][0]["out_channels"] = 8
    _edit_manifest(tmp_path, widen)
    with pytest.raises(BlobShapeMismatchError):
        load_model(tmp_path)


def test_truncated_blob(tmp_path):
    save_model(single_conv(), tmp_path)
    blob = tmp_path / "c.weight.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(TruncatedBlobError):
        load_model(tmp_path)


def test_malformed_manifest(tmp_path):
    save_model(single_conv(), tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ManifestError):
        load_model(tmp_path)
    with pytest.raises(ManifestError):
        load_model(tmp_path / "missing")


def test_unsupported_version(tmp_path):
    save_model(single_conv(), tmp_path)
    _edit_manifest(tmp_path, lambda d: d.update(format_version=2))
    with pytest.raises(ManifestError, match="version"):
        load_model(tmp_path)


def test_error_kinds_are_distinct():
    kinds = {ManifestError, BlobShapeMismatchError, TruncatedBlobError}
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)
