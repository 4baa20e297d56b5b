"""Layer-graph representation of the Siamese tracker, plus the reference builder.

A model is an ordered tuple of :class:`LayerSpec` records and a weight
store keyed by layer id. Layers belong to one of four branches:

``shared``
    run once per input image (the backbone, shared by template and search);
``template`` / ``search``
    run only on the template or search embedding (the necks);
``joint``
    consume outputs of both branches (correlation sites and heads).

Models without template/search/joint layers are plain single-image
networks; they are used for toy tests and calibration experiments.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

from prunekit.errors import GraphError

KINDS = ("conv", "batch_norm", "relu", "max_pool", "cross_correlation_site")
SECTIONS = ("backbone", "neck", "head_cls", "head_reg")
BRANCHES = ("shared", "template", "search", "joint")
IMAGE = "image"
BN_EPS = 1e-5
BN_PARAMS = ("gamma", "beta", "running_mean", "running_var")

# Reference channel plan (AlexNet-style backbone, anchor-free Siamese heads).
# (out_channels, kernel, stride, followed_by_pool)
BACKBONE_PLAN = (
    (96, 11, 2, True),
    (256, 5, 1, True),
    (384, 3, 1, False),
    (384, 3, 1, False),
    (256, 3, 1, False),
)
NECK_CHANNELS = 256
TOWER_CHANNELS = 256
TOWER_DEPTH = 3
TEMPLATE_SIZE = 127
SEARCH_SIZE = 303


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    in_channels: int
    out_channels: int
    section: str
    inputs: tuple[str, ...]
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    branch: str = "shared"
    prunable: bool = False
    mode: str = ""  # cross-correlation sites only: "depthwise" or "full"

    def replace(self, **kw) -> "LayerSpec":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class ModelMeta:
    template_size: int | None = None
    search_size: int | None = None
    total_stride: int | None = None
    score_size: int | None = None
    # role -> layer id, roles: cls, quality, reg
    outputs: Mapping[str, str] = field(default_factory=dict)

    def to_json(self):
        d = dataclasses.asdict(self)
        d["outputs"] = dict(self.outputs)
        return d


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    weights: Mapping[str, Mapping[str, np.ndarray]]
    meta: ModelMeta = field(default_factory=ModelMeta)
    provenance: Mapping | None = None

    def __post_init__(self):
        frozen = {}
        for lid, params in self.weights.items():
            fp = {}
            for name, arr in params.items():
                a = np.ascontiguousarray(arr, dtype=np.float32)
                if a is arr:
                    a = a.copy()
                a.flags.writeable = False
                fp[name] = a
            frozen[lid] = MappingProxyType(fp)
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "weights", MappingProxyType(frozen))
        object.__setattr__(self, "_index", {l.id: l for l in self.layers})

    def layer(self, lid: str) -> LayerSpec:
        try:
            return self._index[lid]
        except KeyError:
            raise KeyError(f"no layer named {lid!r}") from None

    def __contains__(self, lid):
        return lid in self._index

    @property
    def conv_ids(self) -> list[str]:
        return [l.id for l in self.layers if l.kind == "conv"]

    @property
    def prunable_ids(self) -> list[str]:
        return [l.id for l in self.layers if l.kind == "conv" and l.prunable]

    @property
    def is_siamese(self) -> bool:
        return any(l.branch != "shared" for l in self.layers)

    def consumers(self, lid: str) -> list[LayerSpec]:
        return [l for l in self.layers if lid in l.inputs]

    def with_provenance(self, provenance) -> "ModelGraph":
        return ModelGraph(self.layers, self.weights, self.meta, provenance)


def structurally_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Same layers, meta and bit-identical weights."""
    if a.layers != b.layers or a.meta.to_json() != b.meta.to_json():
        return False
    if set(a.weights) != set(b.weights):
        return False
    for lid, params in a.weights.items():
        other = b.weights[lid]
        if set(params) != set(other):
            return False
        for name, arr in params.items():
            o = other[name]
            if arr.shape != o.shape or arr.tobytes() != o.tobytes():
                return False
    return True


def expected_weight_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    if layer.kind == "conv":
        k = layer.kernel
        return {
            "weight": (layer.out_channels, layer.in_channels, k, k),
            "bias": (layer.out_channels,),
        }
    if layer.kind == "batch_norm":
        return {name: (layer.out_channels,) for name in BN_PARAMS}
    return {}


# ---------------------------------------------------------------------------
# graph interpretation


def passes(model: ModelGraph) -> tuple[str, ...]:
    return ("template", "search", "joint") if model.is_siamese else (IMAGE,)


def run_graph(
    model: ModelGraph,
    feeds: Mapping[str, object],
    op: Callable[[LayerSpec, list], object],
    only: set[str] | None = None,
    stop_after: str | None = None,
) -> dict[str, dict[str, object]]:
    """Evaluate ``op`` over the graph, one pass per branch.

    ``feeds`` maps ``"template"``/``"search"`` (Siamese models) or
    ``"image"`` (plain models) to input values. Returns pass name -> layer
    id -> value. ``only`` restricts which passes run. Evaluation of every
    pass stops once ``stop_after`` has been computed.
    """
    out: dict[str, dict[str, object]] = {}

    def run(layers, env):
        for layer in layers:
            try:
                args = [env[i] for i in layer.inputs]
            except KeyError as e:
                raise GraphError(f"layer {layer.id!r}: input {e.args[0]!r} not available") from None
            env[layer.id] = op(layer, args)
            if layer.id == stop_after:
                break
        return env

    if not model.is_siamese:
        if IMAGE not in feeds:
            raise GraphError("plain model needs an 'image' feed")
        out[IMAGE] = run(model.layers, {IMAGE: feeds[IMAGE]})
        return out

    wanted = set(passes(model)) if only is None else set(only)
    if "joint" in wanted:
        wanted |= {"template", "search"}
    for branch in ("template", "search"):
        if branch not in wanted:
            continue
        if branch not in feeds:
            raise GraphError(f"Siamese model needs a {branch!r} feed")
        layers = [l for l in model.layers if l.branch in ("shared", branch)]
        out[branch] = run(layers, {IMAGE: feeds[branch]})
    if "joint" in wanted:
        env = {}
        for branch in ("template", "search"):
            for l in model.layers:
                if l.branch == branch and l.id in out[branch]:
                    env[l.id] = out[branch][l.id]
        out["joint"] = run([l for l in model.layers if l.branch == "joint"], env)
    return out


def _shape_op(layer: LayerSpec, args):
    """Symbolic forward: values are (channels, h, w)."""
    if layer.kind == "cross_correlation_site":
        (cz, hz, wz), (cx, hx, wx) = args
        if cz != cx:
            raise GraphError(f"{layer.id}: correlating {cz} template channels with {cx} search channels")
        h, w = hx - hz + 1, wx - wz + 1
        if h < 1 or w < 1:
            raise GraphError(f"{layer.id}: template {hz}x{wz} larger than search {hx}x{wx}")
        return (cx if layer.mode != "full" else 1, h, w)
    (c, h, w), = args
    if layer.kind == "conv":
        if c != layer.in_channels:
            raise GraphError(f"{layer.id}: expects {layer.in_channels} input channels, producer gives {c}")
        h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        c = layer.out_channels
    elif layer.kind == "max_pool":
        h = (h - layer.kernel) // layer.stride + 1
        w = (w - layer.kernel) // layer.stride + 1
    if h < 1 or w < 1:
        raise GraphError(f"{layer.id}: spatial extent collapses to {h}x{w}")
    return (c, h, w)


def infer_shapes(model: ModelGraph, input_hw=None) -> dict[str, dict[str, tuple[int, int, int]]]:
    """Per-pass (channels, h, w) of every layer output.

    ``input_hw`` is ``(h, w)`` for plain models, or a mapping with
    ``"template"`` and ``"search"`` extents for Siamese models (defaults
    to the sizes recorded in the model meta).
    """
    if model.is_siamese:
        if input_hw is None:
            if model.meta.template_size is None or model.meta.search_size is None:
                raise GraphError("model meta lacks template/search sizes")
            input_hw = {
                "template": (model.meta.template_size,) * 2,
                "search": (model.meta.search_size,) * 2,
            }
        feeds = {k: (3, *input_hw[k]) for k in ("template", "search")}
    else:
        if input_hw is None:
            raise GraphError("input_hw is required for plain models")
        first = model.layers[0].in_channels if model.layers else 3
        feeds = {IMAGE: (first, *input_hw)}
    return run_graph(model, feeds, _shape_op)


# ---------------------------------------------------------------------------
# validation


def validate(model: ModelGraph) -> None:
    """Raise :class:`GraphError` unless every structural invariant holds."""
    seen: dict[str, LayerSpec] = {}
    for layer in model.layers:
        _check_layer_fields(layer)
        if layer.id in seen or layer.id == IMAGE:
            raise GraphError(f"duplicate layer id {layer.id!r}")
        for src in layer.inputs:
            if src == IMAGE:
                if layer.branch != "shared" and model.is_siamese:
                    raise GraphError(f"{layer.id}: only shared layers may read the input image")
                continue
            if src not in seen:
                raise GraphError(f"{layer.id}: input {src!r} is unknown or not topologically earlier")
            _check_branch_edge(layer, seen[src])
        _check_arity(layer, seen)
        seen[layer.id] = layer

    _check_channels(model)
    _check_weights(model)
    if model.is_siamese:
        _check_siamese(model)


def _check_layer_fields(layer: LayerSpec):
    if not layer.id:
        raise GraphError("layer with empty id")
    if layer.kind not in KINDS:
        raise GraphError(f"{layer.id}: unknown kind {layer.kind!r}")
    if layer.section not in SECTIONS:
        raise GraphError(f"{layer.id}: unknown section {layer.section!r}")
    if layer.branch not in BRANCHES:
        raise GraphError(f"{layer.id}: unknown branch {layer.branch!r}")
    if layer.in_channels < 1 or layer.out_channels < 1:
        raise GraphError(f"{layer.id}: channel counts must be positive")
    if layer.kind in ("conv", "max_pool"):
        if layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
            raise GraphError(f"{layer.id}: invalid kernel/stride/padding")
    elif layer.kernel != 0 or layer.stride != 1 or layer.padding != 0:
        raise GraphError(f"{layer.id}: {layer.kind} layers take no kernel/stride/padding")
    if layer.kind == "max_pool" and layer.padding != 0:
        raise GraphError(f"{layer.id}: padded pooling is not supported")
    if layer.kind == "cross_correlation_site":
        if layer.mode not in ("depthwise", "full"):
            raise GraphError(f"{layer.id}: correlation mode must be depthwise or full")
    elif layer.mode:
        raise GraphError(f"{layer.id}: mode is only meaningful for correlation sites")
    if layer.prunable and layer.kind != "conv":
        raise GraphError(f"{layer.id}: only conv layers can be prunable")
    if layer.prunable and layer.section == "neck":
        raise GraphError(f"{layer.id}: neck layers are never prunable")


def _check_branch_edge(layer: LayerSpec, src: LayerSpec):
    allowed = {
        "shared": ("shared",),
        "template": ("shared", "template"),
        "search": ("shared", "search"),
        "joint": ("template", "search", "joint"),
    }[layer.branch]
    if src.branch not in allowed:
        raise GraphError(f"{layer.id} ({layer.branch}) cannot consume {src.id} ({src.branch})")
    if layer.branch == "joint" and src.branch == "joint" and src.section != layer.section:
        raise GraphError(f"{layer.id}: head section {layer.section} fed from {src.section}")


def _check_arity(layer: LayerSpec, seen):
    if layer.kind == "cross_correlation_site":
        if len(layer.inputs) != 2:
            raise GraphError(f"{layer.id}: correlation needs (template, search) inputs")
        z, x = (seen.get(i) for i in layer.inputs)
        if z is None or x is None or z.branch != "template" or x.branch != "search":
            raise GraphError(f"{layer.id}: inputs must be a template-branch then a search-branch layer")
    elif len(layer.inputs) != 1:
        raise GraphError(f"{layer.id}: {layer.kind} takes exactly one input")


def _producer_channels(model: ModelGraph, lid: str) -> int | None:
    if lid == IMAGE:
        return None
    return model.layer(lid).out_channels


def _check_channels(model: ModelGraph):
    for layer in model.layers:
        if layer.kind == "cross_correlation_site":
            cz, cx = (_producer_channels(model, i) for i in layer.inputs)
            if cz != cx or layer.in_channels != cz:
                raise GraphError(
                    f"{layer.id}: correlation inputs carry {cz} and {cx} channels, layer declares {layer.in_channels}"
                )
            want = layer.in_channels if layer.mode == "depthwise" else 1
            if layer.out_channels != want:
                raise GraphError(f"{layer.id}: {layer.mode} correlation must output {want} channels")
            continue
        src = layer.inputs[0]
        c = _producer_channels(model, src)
        if c is not None and c != layer.in_channels:
            raise GraphError(
                f"{layer.id}: expects {layer.in_channels} input channels but {src} produces {c}"
            )
        if layer.kind != "conv" and layer.out_channels != layer.in_channels:
            raise GraphError(f"{layer.id}: {layer.kind} must preserve channel count")


def _check_weights(model: ModelGraph):
    ids = {l.id for l in model.layers}
    for lid in model.weights:
        if lid not in ids:
            raise GraphError(f"weights stored for unknown layer {lid!r}")
    for layer in model.layers:
        want = expected_weight_shapes(layer)
        have = model.weights.get(layer.id, {})
        if set(have) != set(want):
            raise GraphError(f"{layer.id}: expected tensors {sorted(want)}, found {sorted(have)}")
        for name, shape in want.items():
            if tuple(have[name].shape) != shape:
                raise GraphError(f"{layer.id}.{name}: shape {tuple(have[name].shape)}, expected {shape}")
            if not np.all(np.isfinite(have[name])):
                raise GraphError(f"{layer.id}.{name}: non-finite values")


def _check_siamese(model: ModelGraph):
    for layer in model.layers:
        want = {"backbone": ("shared",), "neck": ("template", "search")}.get(layer.section, ("joint",))
        if layer.branch not in want:
            raise GraphError(f"{layer.id}: {layer.section} layers must be on branch {'/'.join(want)}")
    if not any(l.section == "backbone" for l in model.layers):
        raise GraphError("Siamese model has no shared backbone")
    meta = model.meta
    roles = dict(meta.outputs)
    if set(roles) != {"cls", "quality", "reg"}:
        raise GraphError(f"meta outputs must name cls, quality and reg layers, got {sorted(roles)}")
    for role, lid in roles.items():
        if lid not in model:
            raise GraphError(f"meta output {role} names unknown layer {lid!r}")
        l = model.layer(lid)
        if l.kind != "conv" or l.prunable:
            raise GraphError(f"output projection {lid} must be a non-prunable conv")
    if model.layer(roles["reg"]).out_channels != 4:
        raise GraphError("regression output must have 4 channels")
    for role in ("cls", "quality"):
        if model.layer(roles[role]).out_channels != 1:
            raise GraphError(f"{role} output must have 1 channel")
    shapes = infer_shapes(model)["joint"]
    sizes = {role: shapes[lid][1:] for role, lid in roles.items()}
    if len(set(sizes.values())) != 1:
        raise GraphError(f"head output maps differ in size: {sizes}")
    s = sizes["cls"]
    if s[0] != s[1]:
        raise GraphError(f"score map must be square, got {s}")
    if meta.score_size is not None and s[0] != meta.score_size:
        raise GraphError(f"score map is {s[0]}x{s[0]}, meta says {meta.score_size}")
    if meta.total_stride is not None and total_stride(model) != meta.total_stride:
        raise GraphError(f"layer strides multiply to {total_stride(model)}, meta says {meta.total_stride}")


def total_stride(model: ModelGraph) -> int:
    """Product of strides from the search image to the classification output."""
    stride = 1
    lid = model.meta.outputs["cls"]
    while lid != IMAGE:
        layer = model.layer(lid)
        stride *= layer.stride
        lid = layer.inputs[-1]  # correlation sites: follow the search side
    return stride


# ---------------------------------------------------------------------------
# accounting


def param_count(model: ModelGraph) -> int:
    total = 0
    for layer in model.layers:
        if layer.kind == "conv":
            total += layer.out_channels * layer.in_channels * layer.kernel**2 + layer.out_channels
        elif layer.kind == "batch_norm":
            total += len(BN_PARAMS) * layer.out_channels
    return total


def mac_count(model: ModelGraph, input_hw=None) -> int:
    """Multiply-accumulates of one forward pass, convolutions only.

    For Siamese models the shared backbone is counted once per branch.
    """
    shapes = infer_shapes(model, input_hw)
    total = 0
    for name, env in shapes.items():
        for lid, (c, h, w) in env.items():
            if lid == IMAGE:
                continue
            layer = model.layer(lid)
            # the joint pass also sees the neck outputs it was seeded with
            executed = layer.branch == name or (layer.branch == "shared" and name != "joint") or name == IMAGE
            if layer.kind == "conv" and executed:
                total += c * layer.in_channels * layer.kernel**2 * h * w
    return total


def model_hash(model: ModelGraph) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([dataclasses.asdict(l) for l in model.layers], sort_keys=True).encode())
    h.update(json.dumps(model.meta.to_json(), sort_keys=True).encode())
    for layer in model.layers:
        for name in sorted(model.weights.get(layer.id, {})):
            h.update(f"{layer.id}.{name}".encode())
            h.update(model.weights[layer.id][name].astype("<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# reference architecture


def _scaled(c: int, scale: float, what: str) -> int:
    n = int(np.floor(c * scale + 0.5))
    if n < 1:
        raise ValueError(f"scale {scale} leaves {what} with zero channels")
    return n


def reference_layers(scale: float = 1.0) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    prev, cin = IMAGE, 3
    for i, (c, k, s, pool) in enumerate(BACKBONE_PLAN, start=1):
        cout = _scaled(c, scale, f"backbone.conv{i}")
        cid = f"backbone.conv{i}"
        layers.append(LayerSpec(cid, "conv", cin, cout, "backbone", (prev,), k, s, 0, prunable=True))
        prev = cid
        if i < len(BACKBONE_PLAN):
            for kind in ("batch_norm", "relu"):
                lid = f"backbone.{'bn' if kind == 'batch_norm' else 'relu'}{i}"
                layers.append(LayerSpec(lid, kind, cout, cout, "backbone", (prev,)))
                prev = lid
        if pool:
            lid = f"backbone.pool{i}"
            layers.append(LayerSpec(lid, "max_pool", cout, cout, "backbone", (prev,), 3, 2, 0))
            prev = lid
        cin = cout

    feat = prev
    neck = _scaled(NECK_CHANNELS, scale, "neck")
    for task in ("cls", "reg"):
        for side, branch in (("z", "template"), ("x", "search")):
            layers.append(LayerSpec(f"neck.{task}_{side}", "conv", cin, neck, "neck", (feat,), 3, 1, 0, branch=branch))

    tower = _scaled(TOWER_CHANNELS, scale, "head towers")
    for task in ("cls", "reg"):
        sec = f"head_{task}"
        prev = f"{sec}.xcorr"
        layers.append(
            LayerSpec(prev, "cross_correlation_site", neck, neck, sec, (f"neck.{task}_z", f"neck.{task}_x"),
                      branch="joint", mode="depthwise")
        )
        c = neck
        for j in range(1, TOWER_DEPTH + 1):
            cid = f"{sec}.conv{j}"
            layers.append(LayerSpec(cid, "conv", c, tower, sec, (prev,), 3, 1, 0, branch="joint", prunable=True))
            rid = f"{sec}.relu{j}"
            layers.append(LayerSpec(rid, "relu", tower, tower, sec, (cid,), branch="joint"))
            prev, c = rid, tower
        if task == "cls":
            layers.append(LayerSpec("head_cls.score", "conv", c, 1, sec, (prev,), 1, 1, 0, branch="joint"))
            layers.append(LayerSpec("head_cls.quality", "conv", c, 1, sec, (prev,), 1, 1, 0, branch="joint"))
        else:
            layers.append(LayerSpec("head_reg.offset", "conv", c, 4, sec, (prev,), 1, 1, 0, branch="joint"))
    return layers


def init_weights(layers, seed: int = 0, output_ids=()) -> dict[str, dict[str, np.ndarray]]:
    """He-normal convs, small random biases, plausible BN statistics.

    Convs named in ``output_ids`` get std 0.01 weights so untrained head
    outputs stay in a sane range.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for layer in layers:
        if layer.kind == "conv":
            fan_in = layer.in_channels * layer.kernel**2
            std = 0.01 if layer.id in output_ids else np.sqrt(2.0 / fan_in)
            w = rng.standard_normal((layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
            weights[layer.id] = {
                "weight": (w * std).astype(np.float32),
                "bias": (0.01 * rng.standard_normal(layer.out_channels)).astype(np.float32),
            }
        elif layer.kind == "batch_norm":
            c = layer.out_channels
            weights[layer.id] = {
                "gamma": rng.uniform(0.5, 1.5, c).astype(np.float32),
                "beta": (0.1 * rng.standard_normal(c)).astype(np.float32),
                "running_mean": (0.1 * rng.standard_normal(c)).astype(np.float32),
                "running_var": rng.uniform(0.5, 1.5, c).astype(np.float32),
            }
    return weights


def build_reference_model(scale: float = 1.0, seed: int = 0, template_size: int = TEMPLATE_SIZE,
                          search_size: int = SEARCH_SIZE) -> ModelGraph:
    """Anchor-free Siamese AlexNet tracker with seeded random weights.

    At ``scale=1`` the model has 9,654,022 parameters. ``scale`` shrinks
    every hidden channel count proportionally (round half up).
    """
    if not 0 < scale <= 1:
        raise ValueError(f"scale must lie in (0, 1], got {scale}")
    layers = reference_layers(scale)
    outputs = {"cls": "head_cls.score", "quality": "head_cls.quality", "reg": "head_reg.offset"}
    probe = ModelGraph(layers, {}, ModelMeta(template_size, search_size, None, None, outputs))
    score = infer_shapes(probe)["joint"]["head_cls.score"][1]
    meta = ModelMeta(template_size, search_size, total_stride(probe), score, outputs)
    model = ModelGraph(layers, init_weights(layers, seed, set(outputs.values())), meta)
    validate(model)
    return model
