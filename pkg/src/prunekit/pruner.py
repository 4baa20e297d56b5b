"""One-shot structural pruning: drop filters and every tensor slice that depends on them."""
from __future__ import annotations

import numpy as np

from prunekit.errors import NonPrunableLayerError, PlanError, ZeroChannelError
from prunekit.model_ir import BN_PARAMS, IMAGE, ModelGraph, validate
from prunekit.rank_criterion import PrunePlan


def check_plan(model: ModelGraph, plan: PrunePlan) -> None:
    prunable = set(model.prunable_ids)
    for lid, mask in plan.masks.items():
        if lid not in model:
            raise PlanError(f"plan names unknown layer {lid!r}")
        layer = model.layer(lid)
        if lid not in prunable:
            raise NonPrunableLayerError(f"layer {lid} ({layer.kind}, {layer.section}) is not prunable")
        mask = np.asarray(mask)
        if mask.dtype != bool or mask.shape != (layer.out_channels,):
            raise PlanError(f"{lid}: mask must be a boolean vector of length {layer.out_channels}")
        if not mask.any():
            raise ZeroChannelError(f"plan removes every filter of {lid}")
    missing = prunable - set(plan.masks)
    if missing:
        raise PlanError(f"plan does not cover prunable layers: {sorted(missing)}")


def _channel_masks(model: ModelGraph, plan: PrunePlan):
    """Surviving-channel index array for the output of every layer (None = all)."""
    out: dict[str, np.ndarray | None] = {IMAGE: None}
    for layer in model.layers:
        if layer.kind == "conv":
            out[layer.id] = plan.kept(layer.id) if layer.id in plan.masks else None
        elif layer.kind == "cross_correlation_site":
            if any(out[i] is not None for i in layer.inputs):
                raise PlanError(f"{layer.id}: correlation inputs cannot be pruned")
            out[layer.id] = None
        else:
            out[layer.id] = out[layer.inputs[0]]
    return out


def prune(model: ModelGraph, plan: PrunePlan, provenance=None) -> ModelGraph:
    """Return a new model without the filters ``plan`` drops.

    Kept filters, their biases, the matching batch-norm entries and the
    matching input slices of every consuming conv are copied bit-for-bit.
    """
    check_plan(model, plan)
    keep = _channel_masks(model, plan)
    layers, weights = [], {}
    for layer in model.layers:
        w = model.weights.get(layer.id, {})
        in_idx = keep[layer.inputs[0]] if layer.inputs else None
        out_idx = keep[layer.id]
        n_in = layer.in_channels if in_idx is None else len(in_idx)
        n_out = layer.out_channels if out_idx is None else len(out_idx)
        if layer.kind == "conv":
            wt, b = w["weight"], w["bias"]
            if out_idx is not None:
                wt, b = wt[out_idx], b[out_idx]
            if in_idx is not None:
                wt = wt[:, in_idx]
            weights[layer.id] = {"weight": wt, "bias": b}
        elif layer.kind == "batch_norm":
            weights[layer.id] = {k: (w[k] if out_idx is None else w[k][out_idx]) for k in BN_PARAMS}
        layers.append(layer.replace(in_channels=n_in, out_channels=n_out))
    pruned = ModelGraph(tuple(layers), weights, model.meta, provenance)
    validate(pruned)
    return pruned


def predict_param_count(model: ModelGraph, plan: PrunePlan) -> int:
    """Parameter count the pruned model will have, from channel counts alone."""
    check_plan(model, plan)
    width = {IMAGE: None}
    total = 0
    for layer in model.layers:
        src = width[layer.inputs[0]]
        c_in = layer.in_channels if src is None else src
        if layer.kind == "conv":
            c_out = plan.n_kept(layer.id) if layer.id in plan.masks else layer.out_channels
            total += c_out * c_in * layer.kernel * layer.kernel + c_out
            width[layer.id] = c_out
        else:
            width[layer.id] = layer.out_channels if layer.kind == "cross_correlation_site" else c_in
            if layer.kind == "batch_norm":
                total += len(BN_PARAMS) * c_in
    return total
