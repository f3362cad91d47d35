"""Turn a sparsity-trained model into a physically smaller one."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .graph import LayerSpec, NetworkGraph, check
from .hfp import DEFAULT_THRESHOLD, compute_masks, counting_plan
from .network import Model
from .tensor import BatchNormState, Parameter


class PlanError(ValueError):
    pass


@dataclass
class PrunePlan:
    keep: dict[int, tuple[int, ...]]           # BN layer id -> kept channel indices
    guarded: set[int] = field(default_factory=set)  # BN ids kept alive by the guard

    def removed_channels(self, model: Model) -> dict[int, int]:
        return {b: model.bn[b].channels - len(k) for b, k in self.keep.items()}


def zero_inactive(model: Model, t: float = DEFAULT_THRESHOLD) -> Model:
    """Copy of ``model`` with gamma and beta set to 0 on every inactive channel."""
    out = model.copy()
    masks = compute_masks(out.graph, out.gammas(), t)
    for b, mask in masks.items():
        dead = ~mask
        out.bn[b].gamma.data[dead] = 0
        out.bn[b].beta.data[dead] = 0
    return out


def make_plan(model: Model, t: float = DEFAULT_THRESHOLD) -> PrunePlan:
    """Active channels per BN slot.

    A slot with no active channel keeps the single channel with the largest
    (summed) ``|gamma|`` so no layer ends up empty.
    """
    plan = counting_plan(model.graph)
    gammas = model.gammas()
    masks = compute_masks(model.graph, gammas, t)
    keep, guarded = {}, set()
    for members in plan.slots:
        idx = tuple(int(i) for i in np.flatnonzero(masks[members[0]]))
        if not idx:
            score = np.sum([np.abs(gammas[b].astype(np.float64)) for b in members], axis=0)
            idx = (int(np.argmax(score)),)
            guarded.update(members)
        for b in members:
            keep[b] = idx
    return PrunePlan(keep, guarded)


def _check_plan(model: Model, plan: PrunePlan) -> None:
    graph = model.graph
    for b in graph.batchnorm_ids():
        if b not in plan.keep:
            raise PlanError(f"plan has no keep list for batchnorm {b}")
        k = plan.keep[b]
        c = model.bn[b].channels
        if not k:
            raise PlanError(f"keep list for batchnorm {b} is empty")
        if any(j <= i for i, j in zip(k, k[1:])) or k[0] < 0 or k[-1] >= c:
            raise PlanError(f"keep list for batchnorm {b} must be strictly increasing within [0, {c})")
    for group in graph.shortcut_groups:
        if len({plan.keep[b] for b in group}) != 1:
            raise PlanError(f"shortcut group {group} members have different keep lists")


def structural_prune(model: Model, plan: PrunePlan) -> Model:
    """Delete pruned channels from weights, BN state, and the graph."""
    _check_plan(model, plan)
    graph = model.graph
    keep_out: dict = {None: np.arange(graph.input_shape[0])}
    for lid in graph.execution_order():
        l = graph.layer(lid)
        src = [keep_out[p] for p in l.preds] if l.preds else [keep_out[None]]
        if l.kind in ("conv", "fc"):
            consumers = graph.consumers(lid)
            if len(consumers) == 1 and graph.layer(consumers[0]).kind == "batchnorm":
                keep_out[lid] = np.asarray(plan.keep[consumers[0]])
            else:
                keep_out[lid] = np.arange(l.out_channels)
        elif l.kind == "batchnorm":
            keep_out[lid] = np.asarray(plan.keep[lid])
        elif l.kind == "add":
            if any(not np.array_equal(s, src[0]) for s in src[1:]):
                raise PlanError(f"add junction {lid} would merge differently pruned branches")
            keep_out[lid] = src[0]
        else:
            keep_out[lid] = src[0]

    layers, weights, biases, bn = [], {}, {}, {}
    for l in graph.layers:
        k_in = keep_out[l.preds[0]] if l.preds else keep_out[None]
        k_out = keep_out[l.id]
        layers.append(dataclasses.replace(l, in_channels=len(k_in), out_channels=len(k_out)))
        if l.id in model.weights:
            w = model.weights[l.id].data[k_out][:, k_in]
            weights[l.id] = Parameter(np.ascontiguousarray(w), name=model.weights[l.id].name)
            biases[l.id] = Parameter(model.biases[l.id].data[k_out].copy(), name=model.biases[l.id].name)
        elif l.id in model.bn:
            s = model.bn[l.id]
            bn[l.id] = BatchNormState(
                gamma=Parameter(s.gamma.data[k_out].copy(), name=s.gamma.name),
                beta=Parameter(s.beta.data[k_out].copy(), name=s.beta.name),
                running_mean=s.running_mean[k_out].copy(),
                running_var=s.running_var[k_out].copy(),
                eps=s.eps, momentum=s.momentum,
            )
    new_graph = NetworkGraph(tuple(layers), graph.shortcut_groups, graph.num_classes, graph.input_shape)
    return Model(check(new_graph), weights, biases, bn)


def fold_batchnorm(model: Model) -> Model:
    """Absorb every BN into the conv/fc feeding it and drop the BN layers."""
    graph = model.graph
    absorbed: dict[int, int] = {}  # bn id -> producer id
    for b in graph.batchnorm_ids():
        l = graph.layer(b)
        pred = graph.layer(l.preds[0]) if l.preds else None
        if pred is None or pred.kind not in ("conv", "fc"):
            raise ValueError(f"batchnorm {b} has no conv/fc predecessor to fold into")
        absorbed[b] = pred.id

    dtype = model.dtype
    weights, biases = {}, {}
    for lid, w in model.weights.items():
        weights[lid] = Parameter(w.data.copy(), name=w.name)
        biases[lid] = Parameter(model.biases[lid].data.copy(), name=model.biases[lid].name)
    for b, p in absorbed.items():
        s = model.bn[b]
        scale = s.gamma.data.astype(np.float64) / np.sqrt(s.running_var.astype(np.float64) + s.eps)
        w = model.weights[p].data.astype(np.float64)
        bias = model.biases[p].data.astype(np.float64)
        w_hat = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
        b_hat = (bias - s.running_mean) * scale + s.beta.data
        weights[p] = Parameter(w_hat.astype(dtype), name=weights[p].name)
        biases[p] = Parameter(b_hat.astype(dtype), name=biases[p].name)

    layers = []
    for l in graph.layers:
        if l.id in absorbed:
            continue
        preds = tuple(absorbed.get(q, q) for q in l.preds)
        layers.append(dataclasses.replace(l, preds=preds))
    new_graph = NetworkGraph(tuple(layers), (), graph.num_classes, graph.input_shape)
    return Model(check(new_graph), weights, biases, {})
