"""Budget-driven channel sparsity on batch-norm scaling factors.

A channel is active while the magnitude of its scaling factor exceeds a
threshold ``t``. The number of surviving weights and multiplications of a
network follows in closed form from how many input and output channels of
each conv/fc layer are active, and a rectified loss measures how far those
counts are above the user's budgets. The loss is pushed back onto the
scaling factors through a straight-through estimator that points away from
zero, so gradient descent shrinks ``|gamma|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np

from .graph import WEIGHTED, BaseComplexity, NetworkGraph, base_complexity, channel_sources, check

DEFAULT_THRESHOLD = 1e-4


def indicator(gamma, t: float = DEFAULT_THRESHOLD):
    """1 where ``|gamma| > t`` and 0 where ``|gamma| <= t`` (works on arrays)."""
    if t <= 0:
        raise ValueError("threshold t must be positive")
    out = (np.abs(gamma) > t).astype(np.int8)
    return int(out) if np.ndim(gamma) == 0 else out


def indicator_ste_grad(gamma):
    """Surrogate derivative of the indicator: -1 for gamma <= 0, +1 for gamma > 0."""
    out = np.where(np.asarray(gamma) > 0, 1.0, -1.0)
    return float(out) if np.ndim(gamma) == 0 else out


def group_mask(gammas: Sequence[np.ndarray], t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Shared mask of a shortcut group from element-wise sums of ``|gamma|``."""
    lengths = {len(g) for g in gammas}
    if len(lengths) != 1:
        raise ValueError(f"group members have different channel counts: {sorted(lengths)}")
    total = np.sum([np.abs(np.asarray(g, dtype=np.float64)) for g in gammas], axis=0)
    return indicator(total, t).astype(bool)


@dataclass(frozen=True)
class PruningTargets:
    target_params: int
    target_mults: int
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.target_params < 0 or self.target_mults < 0:
            raise ValueError("targets must be non-negative")

    @classmethod
    def from_rates(cls, base: BaseComplexity, params_rate: float, mults_rate: float,
                   threshold: float = DEFAULT_THRESHOLD) -> "PruningTargets":
        """Convert desired pruning rates (fraction removed) into absolute budgets."""
        for name, r in (("params", params_rate), ("mults", mults_rate)):
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{name} pruning rate must be in [0, 1], got {r}")
        # round first so that e.g. (1 - 0.7) * 100 does not floor to 29
        p_star = math.floor(round((1.0 - params_rate) * base.total_params, 6))
        m_star = math.floor(round((1.0 - mults_rate) * base.total_mults, 6))
        return cls(p_star, m_star, threshold)

    def rates(self, base: BaseComplexity) -> tuple[float, float]:
        return 1 - self.target_params / base.total_params, 1 - self.target_mults / base.total_mults


# ---------------------------------------------------------------------------
# counting


@dataclass(frozen=True)
class CountedLayer:
    layer_id: int
    kind: str
    params: int
    mults: int
    in_channels: int
    out_channels: int
    in_slot: Optional[int]   # None: input channels always fully active
    out_slot: Optional[int]  # None: output channels always fully active


@dataclass(frozen=True)
class CountingPlan:
    """Which channel slot gates the inputs and outputs of every conv/fc layer.

    A slot is one batch-norm layer, or one whole shortcut group whose members
    share a mask.
    """

    layers: tuple[CountedLayer, ...]
    slots: tuple[tuple[int, ...], ...]
    slot_of: Mapping[int, int]
    base: BaseComplexity

    def __hash__(self):
        return id(self)


@lru_cache(maxsize=64)
def counting_plan(graph: NetworkGraph) -> CountingPlan:
    check(graph)
    base = base_complexity(graph)
    grouped = {b for g in graph.shortcut_groups for b in g}
    slots = [tuple(g) for g in graph.shortcut_groups]
    slots += [(b,) for b in graph.batchnorm_ids() if b not in grouped]
    slot_of = {b: si for si, members in enumerate(slots) for b in members}

    layers = []
    for l in graph.layers:
        if l.kind not in WEIGHTED:
            continue
        in_slot = None
        if l.preds:
            srcs = channel_sources(graph, l.preds[0])
            if None not in srcs:
                in_slot = slot_of[next(iter(srcs))]
        out_slot = None
        consumers = graph.consumers(l.id)
        if len(consumers) == 1 and graph.layer(consumers[0]).kind == "batchnorm":
            out_slot = slot_of[consumers[0]]
        layers.append(CountedLayer(l.id, l.kind, base.per_layer_params[l.id], base.per_layer_mults[l.id],
                                   l.in_channels, l.out_channels, in_slot, out_slot))
    return CountingPlan(tuple(layers), tuple(slots), slot_of, base)


def _slot_masks(plan: CountingPlan, masks: Mapping[int, np.ndarray]) -> list[np.ndarray]:
    out = []
    for members in plan.slots:
        missing = [b for b in members if b not in masks]
        if missing:
            raise KeyError(f"missing mask for batchnorm layer(s) {missing}")
        first = np.asarray(masks[members[0]])
        for b in members[1:]:
            if not np.array_equal(np.asarray(masks[b]), first):
                raise ValueError(f"shortcut group {members} members carry different masks")
        out.append(first)
    return out


def compute_masks(graph: NetworkGraph, gammas: Mapping[int, np.ndarray],
                  t: float = DEFAULT_THRESHOLD) -> dict[int, np.ndarray]:
    """Per-BN boolean masks; shortcut-group members all get the group mask."""
    plan = counting_plan(graph)
    masks = {}
    for members in plan.slots:
        m = group_mask([gammas[b] for b in members], t)
        for b in members:
            masks[b] = m
    return masks


@dataclass(frozen=True)
class ComplexitySnapshot:
    effective_params: int
    effective_mults: int
    kept_params: Mapping[int, int]
    kept_mults: Mapping[int, int]
    epoch: int = 0

    def per_layer_rates(self, base: BaseComplexity) -> dict[int, tuple[float, float]]:
        """Pruning rate (fraction removed) of params and mults per conv/fc layer."""
        return {
            lid: (1 - self.kept_params[lid] / base.per_layer_params[lid] if base.per_layer_params[lid] else 0.0,
                  1 - self.kept_mults[lid] / base.per_layer_mults[lid] if base.per_layer_mults[lid] else 0.0)
            for lid in self.kept_params
        }

    def rates(self, base: BaseComplexity) -> tuple[float, float]:
        return 1 - self.effective_params / base.total_params, 1 - self.effective_mults / base.total_mults


def _active_counts(plan: CountingPlan, slot_masks: list[np.ndarray], layer: CountedLayer) -> tuple[int, int]:
    a_in = layer.in_channels if layer.in_slot is None else int(np.count_nonzero(slot_masks[layer.in_slot]))
    a_out = layer.out_channels if layer.out_slot is None else int(np.count_nonzero(slot_masks[layer.out_slot]))
    return a_in, a_out


def snapshot(graph: NetworkGraph, masks: Mapping[int, np.ndarray], epoch: int = 0) -> ComplexitySnapshot:
    plan = counting_plan(graph)
    sm = _slot_masks(plan, masks)
    kept_p, kept_m = {}, {}
    for layer in plan.layers:
        a_in, a_out = _active_counts(plan, sm, layer)
        denom = layer.in_channels * layer.out_channels
        # params and mults are exact multiples of C_in * C_out
        kept_p[layer.layer_id] = layer.params // denom * a_in * a_out
        kept_m[layer.layer_id] = layer.mults // denom * a_in * a_out
    return ComplexitySnapshot(sum(kept_p.values()), sum(kept_m.values()), kept_p, kept_m, epoch)


def effective_params(graph: NetworkGraph, masks: Mapping[int, np.ndarray]) -> int:
    return snapshot(graph, masks).effective_params


def effective_mults(graph: NetworkGraph, masks: Mapping[int, np.ndarray]) -> int:
    return snapshot(graph, masks).effective_mults


# ---------------------------------------------------------------------------
# loss


def _relu(x: float) -> float:
    return x if x > 0 else 0.0


def pruning_loss(snap: ComplexitySnapshot, targets: PruningTargets, base: BaseComplexity) -> float:
    if base.total_params <= 0 or base.total_mults <= 0:
        raise ValueError("base complexity totals must be positive")
    return (_relu((snap.effective_params - targets.target_params) / base.total_params)
            + _relu((snap.effective_mults - targets.target_mults) / base.total_mults))


def slot_sensitivities(plan: CountingPlan, slot_masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """d(P_eff)/d(phi) and d(M_eff)/d(phi) for one channel of each slot.

    Counts are bilinear in the active-channel sums, so the derivative is the
    same for every channel of a slot: the layer's per-channel-pair size
    times the active count on the other side, summed over the layers the
    slot feeds (inputs) and produces (outputs).
    """
    dp = np.zeros(len(plan.slots))
    dm = np.zeros(len(plan.slots))
    for layer in plan.layers:
        a_in, a_out = _active_counts(plan, slot_masks, layer)
        denom = layer.in_channels * layer.out_channels
        unit_p, unit_m = layer.params / denom, layer.mults / denom
        if layer.out_slot is not None:
            dp[layer.out_slot] += unit_p * a_in
            dm[layer.out_slot] += unit_m * a_in
        if layer.in_slot is not None:
            dp[layer.in_slot] += unit_p * a_out
            dm[layer.in_slot] += unit_m * a_out
    return dp, dm


def pruning_loss_grad_gamma(
    graph: NetworkGraph,
    gammas: Mapping[int, np.ndarray],
    masks: Mapping[int, np.ndarray],
    targets: PruningTargets,
    base: Optional[BaseComplexity] = None,
) -> dict[int, np.ndarray]:
    """Gradient of the pruning loss with respect to every BN scaling factor."""
    plan = counting_plan(graph)
    base = base or plan.base
    expected = compute_masks(graph, gammas, targets.threshold)
    for b, m in expected.items():
        if b not in masks or not np.array_equal(np.asarray(masks[b], dtype=bool), m):
            raise ValueError(f"mask for batchnorm {b} is inconsistent with its scaling factors")
    sm = _slot_masks(plan, masks)
    snap = snapshot(graph, masks)
    # rectifier subgradient is 0 at exactly 0
    wp = 1.0 / base.total_params if snap.effective_params > targets.target_params else 0.0
    wm = 1.0 / base.total_mults if snap.effective_mults > targets.target_mults else 0.0
    dp, dm = slot_sensitivities(plan, sm)
    dphi = wp * dp + wm * dm
    return {b: dphi[plan.slot_of[b]] * indicator_ste_grad(np.asarray(gammas[b], dtype=np.float64))
            for b in plan.slot_of}


# ---------------------------------------------------------------------------
# lambda schedule


@dataclass(frozen=True)
class LambdaSchedule:
    mode: str = "linear_heatup"  # or "constant"
    start_value: float = 1.0
    target_value: float = 1.0
    total_epochs: int = 1

    def __post_init__(self):
        if self.mode not in ("constant", "linear_heatup"):
            raise ValueError(f"unknown lambda mode {self.mode!r}")
        if self.start_value <= 0:
            raise ValueError("lambda start value must be positive")
        if self.mode == "linear_heatup" and self.target_value < self.start_value:
            raise ValueError("heat-up needs target_value >= start_value")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def lambda_at(schedule: LambdaSchedule, epoch: int) -> float:
    if schedule.mode == "constant" or schedule.total_epochs == 1:
        return schedule.target_value
    frac = epoch / (schedule.total_epochs - 1)
    value = schedule.start_value + (schedule.target_value - schedule.start_value) * frac
    return min(value, schedule.target_value)
