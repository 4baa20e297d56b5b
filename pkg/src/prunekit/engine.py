"""Deterministic forward execution of a :class:`~prunekit.model_ir.ModelGraph`."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from prunekit import kernels
from prunekit.errors import GraphError, ShapeError
from prunekit.model_ir import BN_EPS, IMAGE, LayerSpec, ModelGraph, run_graph
from prunekit.tensor_core import as_tensor, batch_norm_apply, conv2d, max_pool2d, relu

OUTPUT = "output"


def cross_correlate(template_feat, search_feat, mode="full"):
    """Slide each template over its search map.

    ``mode="full"`` sums over channels and gives one output channel;
    ``mode="depthwise"`` keeps one output channel per input channel.
    Batch entries are paired: template ``b`` is matched against search ``b``.
    """
    z = as_tensor(template_feat, "template features")
    x = as_tensor(search_feat, "search features")
    if z.shape[0] != x.shape[0]:
        raise ShapeError(f"batch mismatch: {z.shape[0]} templates vs {x.shape[0]} search maps")
    if z.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: template has {z.shape[1]}, search has {x.shape[1]}")
    if z.shape[2] > x.shape[2] or z.shape[3] > x.shape[3]:
        raise ShapeError(f"template {z.shape[2:]} larger than search {x.shape[2:]}")
    if mode == "depthwise":
        return kernels.get("xcorr_depthwise")(z, x)
    if mode != "full":
        raise ValueError(f"unknown correlation mode {mode!r}")
    win = sliding_window_view(x, z.shape[2:], axis=(2, 3))
    out = np.einsum("bchwij,bcij->bhw", win.astype(np.float64), z.astype(np.float64), optimize=True)
    return out[:, None].astype(np.float32)


def apply_layer(model: ModelGraph, layer: LayerSpec, args):
    w = model.weights.get(layer.id, {})
    if layer.kind == "conv":
        x = args[0]
        if x.shape[1] != layer.in_channels:
            raise ShapeError(
                f"layer {layer.id}: expected {layer.in_channels} input channels, got {x.shape[1]}"
            )
        return conv2d(x, w["weight"], w["bias"], layer.stride, layer.padding, layer=layer.id)
    if layer.kind == "batch_norm":
        return batch_norm_apply(args[0], w["gamma"], w["beta"], w["running_mean"], w["running_var"], BN_EPS)
    if layer.kind == "relu":
        return relu(args[0])
    if layer.kind == "max_pool":
        try:
            return max_pool2d(args[0], layer.kernel, layer.stride)
        except ShapeError as e:
            raise ShapeError(f"layer {layer.id}: {e}") from None
    if layer.kind == "cross_correlation_site":
        try:
            return cross_correlate(args[0], args[1], layer.mode)
        except ShapeError as e:
            raise ShapeError(f"layer {layer.id}: {e}") from None
    raise GraphError(f"layer {layer.id}: cannot execute kind {layer.kind!r}")


def _check_input(model: ModelGraph, x, branch):
    x = as_tensor(x, f"{branch} input")
    size = {"template": model.meta.template_size, "search": model.meta.search_size}.get(branch)
    if size is not None and x.shape[2:] != (size, size):
        raise ShapeError(f"{branch} input is {x.shape[2]}x{x.shape[3]}, model expects {size}x{size}")
    first = model.layers[0]
    if x.shape[1] != first.in_channels:
        raise ShapeError(f"{branch} input has {x.shape[1]} channels, model expects {first.in_channels}")
    return x


def _feeds(model: ModelGraph, inputs):
    if model.is_siamese:
        if isinstance(inputs, dict):
            z, x = inputs.get("template"), inputs.get("search")
        elif isinstance(inputs, (tuple, list)) and len(inputs) == 2:
            z, x = inputs
        else:
            z, x = None, inputs
        feeds = {}
        if z is not None:
            feeds["template"] = _check_input(model, z, "template")
        if x is not None:
            feeds["search"] = _check_input(model, x, "search")
        return feeds
    return {IMAGE: _check_input(model, inputs, IMAGE)}


def run(model: ModelGraph, inputs, only=None, stop_after=None):
    """Evaluate the graph, returning pass -> layer id -> tensor."""
    feeds = _feeds(model, inputs)
    if only is None and model.is_siamese:
        only = set(feeds) | ({"joint"} if len(feeds) == 2 else set())
    return run_graph(model, feeds, lambda layer, args: apply_layer(model, layer, args), only, stop_after)


def forward_features(model: ModelGraph, x, section="backbone", branch="search"):
    """Output of the last layer of ``section`` along one branch.

    For Siamese models ``branch`` picks the template or search path
    (neck sections differ per branch). Plain models ignore ``branch``.
    """
    if model.is_siamese:
        if section not in ("backbone", "neck"):
            raise GraphError(f"section {section!r} needs both inputs; use forward()")
        layers = [l for l in model.layers if l.section == section and l.branch in ("shared", branch)]
        inputs = {branch: x}
    else:
        layers = [l for l in model.layers if l.section == section]
        inputs = x
    if not layers:
        raise GraphError(f"model has no {section!r} layers on branch {branch!r}")
    target = layers[-1].id
    env = run(model, inputs, only={branch} if model.is_siamese else None, stop_after=target)
    return env[branch if model.is_siamese else IMAGE][target]


def forward(model: ModelGraph, template, search):
    """Raw head maps ``(cls, quality, reg)`` for a template/search pair."""
    env = run(model, (template, search))["joint"]
    roles = model.meta.outputs
    return env[roles["cls"]], env[roles["quality"]], env[roles["reg"]]


def _post_activation(model: ModelGraph, lid: str) -> str:
    # walk forward through batch_norm/relu consumers while the chain is linear
    cur = lid
    while True:
        nxt = [c for c in model.consumers(cur) if c.kind in ("batch_norm", "relu")]
        if len(nxt) != 1 or len(model.consumers(cur)) != 1:
            return cur
        cur = nxt[0].id


def forward_with_taps(model: ModelGraph, inputs, tap_ids, post_activation=False):
    """Forward pass that also returns conv feature maps.

    Taps are the raw convolution outputs (before batch norm / ReLU) unless
    ``post_activation`` is set. Shared backbone layers of a Siamese model
    are tapped on the search branch. The final output is stored under
    ``"output"``: a tensor for plain models, or a role -> tensor mapping
    for Siamese models.
    """
    tap_ids = list(tap_ids)
    for lid in tap_ids:
        if lid not in model or model.layer(lid).kind != "conv":
            raise GraphError(f"unknown conv tap {lid!r}")
    src = {lid: _post_activation(model, lid) if post_activation else lid for lid in tap_ids}
    envs = run(model, inputs)
    taps = {}
    if model.is_siamese:
        for lid in tap_ids:
            branch = model.layer(lid).branch
            env = envs["search" if branch == "shared" else branch]
            taps[lid] = env[src[lid]]
        if "joint" in envs:
            taps[OUTPUT] = {role: envs["joint"][lid] for role, lid in model.meta.outputs.items()}
    else:
        env = envs[IMAGE]
        for lid in tap_ids:
            taps[lid] = env[src[lid]]
        taps[OUTPUT] = env[model.layers[-1].id]
    return taps
