"""Baseline training, sparsity learning, pruning and fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import hfp
from .data import Dataset, DataSplits
from .graph import BaseComplexity, NetworkGraph, base_complexity
from .hfp import LambdaSchedule, PruningTargets
from .network import Model
from .pruner import PrunePlan, make_plan, structural_prune, zero_inactive
from .tensor import Tensor, sgd_nesterov_step, softmax_cross_entropy

log = logging.getLogger(__name__)

LAMBDA_MODES = {"constant": "constant", "heatup": "linear_heatup", "linear_heatup": "linear_heatup"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_start: float = 0.02
    lr_end: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    target_params_rate: float = 0.5
    target_mults_rate: float = 0.5
    threshold: float = hfp.DEFAULT_THRESHOLD
    lambda_mode: str = "heatup"
    lambda_target: Optional[float] = None  # None: measure from an untrained model
    lambda_start: float = 1.0
    fine_tune_epochs: int = 3
    fine_tune_mode: str = "full"  # or "bn_stats"
    baseline_epochs: Optional[int] = None  # None: same as epochs

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch-norm needs two samples)")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("learning rates must satisfy 0 < lr_end <= lr_start")
        for name in ("target_params_rate", "target_mults_rate"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{name.replace('_', '-')} must be in [0, 1], got {r}")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValueError(f"lambda mode must be one of {sorted(LAMBDA_MODES)}")
        if self.fine_tune_epochs < 0:
            raise ValueError("fine_tune_epochs must be >= 0")
        if self.fine_tune_mode not in ("full", "bn_stats"):
            raise ValueError("fine_tune_mode must be 'full' or 'bn_stats'")


@dataclass
class EpochLog:
    stage: str
    epoch: int
    lr: float
    lam: float
    learning_loss: float
    pruning_loss: float
    total_loss: float
    effective_params: int
    effective_mults: int
    params_rate: float
    mults_rate: float
    train_acc: float
    test_acc: float
    layer_rates: dict[int, tuple[float, float]] = field(default_factory=dict)
    proportional: dict[int, tuple[float, float]] = field(default_factory=dict)


def lr_at(epoch: int, epochs: int, lr_start: float, lr_end: float) -> float:
    """Linear decay per epoch: ``lr_start`` at epoch 0, ``lr_end`` at the last epoch."""
    if epochs <= 1:
        return lr_start
    return lr_start + (lr_end - lr_start) * epoch / (epochs - 1)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        if len(idx) >= 2:
            yield idx


def proportional_rates(base: BaseComplexity, snap: hfp.ComplexitySnapshot) -> dict[int, tuple[float, float]]:
    """Each layer's share of the total removed params and mults.

    Empty when nothing has been removed.
    """
    removed_p = {l: base.per_layer_params[l] - snap.kept_params[l] for l in snap.kept_params}
    removed_m = {l: base.per_layer_mults[l] - snap.kept_mults[l] for l in snap.kept_mults}
    tp, tm = sum(removed_p.values()), sum(removed_m.values())
    if tp == 0 and tm == 0:
        log.info("no reduction yet; proportional rates are empty")
        return {}
    return {l: (removed_p[l] / tp if tp else 0.0, removed_m[l] / tm if tm else 0.0) for l in removed_p}


def _complexity_fields(model: Model, base: BaseComplexity, threshold: float) -> dict:
    masks = hfp.compute_masks(model.graph, model.gammas(), threshold)
    snap = hfp.snapshot(model.graph, masks)
    pr, mr = snap.rates(base)
    return dict(effective_params=snap.effective_params, effective_mults=snap.effective_mults,
                params_rate=pr, mults_rate=mr, layer_rates=snap.per_layer_rates(base),
                proportional=proportional_rates(base, snap))


def _run_epoch(model: Model, train: Dataset, lr: float, cfg: TrainConfig, rng: np.random.Generator,
               targets: Optional[PruningTargets] = None, lam: float = 0.0,
               update: bool = True) -> tuple[float, float, float, float]:
    """One pass over ``train``. Returns mean learning, pruning and total loss and accuracy."""
    params = model.parameters()
    base = hfp.counting_plan(model.graph).base if targets is not None else None
    sum_learn = sum_prune = sum_total = 0.0
    correct = seen = nb = 0
    for idx in batches(len(train), cfg.batch_size, rng):
        x, y = train.images[idx], train.labels[idx]
        prune_val = 0.0
        if targets is not None:
            # masks are snapshotted before the step so loss and gradient agree
            gammas = {b: g.copy() for b, g in model.gammas().items()}
            masks = hfp.compute_masks(model.graph, gammas, targets.threshold)
            prune_val = hfp.pruning_loss(hfp.snapshot(model.graph, masks), targets, base)
        logits = model.forward(Tensor(x), train=True)
        loss = softmax_cross_entropy(logits, y)
        learn_val = loss.item()
        if not math.isfinite(learn_val):
            raise TrainingDiverged(f"non-finite learning loss {learn_val} at lr={lr}")
        if update:
            loss.backward()
            if targets is not None and lam > 0 and prune_val > 0:
                grads = hfp.pruning_loss_grad_gamma(model.graph, gammas, masks, targets, base)
                for b, g in grads.items():
                    p = model.bn[b].gamma
                    p.grad += (lam * g).astype(p.dtype)
            sgd_nesterov_step(params, lr, cfg.momentum)
        sum_learn += learn_val
        sum_prune += prune_val
        sum_total += learn_val + lam * prune_val
        correct += int((logits.data.argmax(axis=1) == y).sum())
        seen += len(y)
        nb += 1
    nb = max(nb, 1)
    return sum_learn / nb, sum_prune / nb, sum_total / nb, correct / max(seen, 1)


def _train_loop(model: Model, data: DataSplits, cfg: TrainConfig, epochs: int, stage: str,
                lr_fn: Callable[[int], float], targets: Optional[PruningTargets] = None,
                schedule: Optional[LambdaSchedule] = None, update: bool = True,
                rng: Optional[np.random.Generator] = None) -> list[EpochLog]:
    rng = rng or np.random.default_rng(cfg.seed)
    base = base_complexity(model.graph)
    ref_base = hfp.counting_plan(model.graph).base
    logs = []
    for epoch in range(epochs):
        lr = lr_fn(epoch)
        lam = hfp.lambda_at(schedule, epoch) if schedule is not None else 0.0
        learn, prune, total, acc = _run_epoch(model, data.train, lr, cfg, rng, targets, lam, update)
        cx = _complexity_fields(model, ref_base, cfg.threshold) if targets is not None else dict(
            effective_params=base.total_params, effective_mults=base.total_mults,
            params_rate=0.0, mults_rate=0.0)
        entry = EpochLog(stage=stage, epoch=epoch, lr=lr, lam=lam, learning_loss=learn, pruning_loss=prune,
                         total_loss=total, train_acc=acc, test_acc=model.accuracy(data.test.images, data.test.labels),
                         **cx)
        log.info("%s epoch %d lr=%.5f lam=%.3f L_learn=%.4f L_prune=%.4f P-rate=%.3f M-rate=%.3f acc=%.3f/%.3f",
                 stage, epoch, lr, lam, learn, prune, entry.params_rate, entry.mults_rate, acc, entry.test_acc)
        logs.append(entry)
    return logs


def train_baseline(graph: NetworkGraph, data: DataSplits, cfg: TrainConfig,
                   epochs: Optional[int] = None) -> tuple[Model, list[EpochLog]]:
    """Plain supervised training from a seeded initialization."""
    _check_data(graph, data)
    epochs = epochs or cfg.baseline_epochs or cfg.epochs
    model = Model.init(graph, seed=cfg.seed)
    logs = _train_loop(model, data, cfg, epochs, "baseline",
                       lambda e: lr_at(e, epochs, cfg.lr_start, cfg.lr_end),
                       rng=np.random.default_rng([cfg.seed, 1]))
    return model, logs


def _check_data(graph: NetworkGraph, data: DataSplits) -> None:
    if tuple(data.image_shape) != tuple(graph.input_shape):
        raise ValueError(f"dataset images {data.image_shape} do not match graph input {graph.input_shape}")
    if data.num_classes != graph.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, graph outputs {graph.num_classes}")


def mean_learning_loss(model: Model, train: Dataset, batch_size: int = 64) -> float:
    """Mean cross-entropy over one pass with batch statistics; ``model`` is not modified."""
    probe = model.copy()
    total, n = 0.0, 0
    for i in range(0, len(train), batch_size):
        x, y = train.images[i:i + batch_size], train.labels[i:i + batch_size]
        if len(y) < 2:
            continue
        loss = softmax_cross_entropy(probe.forward(Tensor(x), train=True), y)
        total += loss.item() * len(y)
        n += len(y)
    return total / n


def lambda_from_losses(learning_loss: float, pruning_loss: float) -> float:
    if pruning_loss <= 0:
        log.warning("targets already met at start; using lambda = 1")
        return 1.0
    return learning_loss / pruning_loss


def measure_lambda_target(model: Model, data: DataSplits, targets: PruningTargets, batch_size: int = 64) -> float:
    """Lambda that makes lambda * L_pruning equal the model's mean learning loss."""
    base = hfp.counting_plan(model.graph).base
    masks = hfp.compute_masks(model.graph, model.gammas(), targets.threshold)
    prune = hfp.pruning_loss(hfp.snapshot(model.graph, masks), targets, base)
    if prune <= 0:
        return lambda_from_losses(0.0, prune)
    return lambda_from_losses(mean_learning_loss(model, data.train, batch_size), prune)


def build_schedule(cfg: TrainConfig, target_value: float) -> LambdaSchedule:
    mode = LAMBDA_MODES[cfg.lambda_mode]
    if mode == "linear_heatup" and target_value < cfg.lambda_start:
        log.warning("lambda target %.4g is below the heat-up start %.4g; using a constant schedule",
                    target_value, cfg.lambda_start)
        mode = "constant"
    return LambdaSchedule(mode, cfg.lambda_start, target_value, cfg.epochs)


def sparsity_learn(model: Model, data: DataSplits, cfg: TrainConfig, targets: PruningTargets,
                   schedule: LambdaSchedule) -> tuple[Model, list[EpochLog]]:
    """Train with ``L_learning + lambda * L_pruning``; returns a new model."""
    model = model.copy()
    logs = _train_loop(model, data, cfg, cfg.epochs, "sparsity",
                       lambda e: lr_at(e, cfg.epochs, cfg.lr_start, cfg.lr_end),
                       targets=targets, schedule=schedule, rng=np.random.default_rng([cfg.seed, 2]))
    return model, logs


def fine_tune(model: Model, data: DataSplits, cfg: TrainConfig) -> tuple[Model, list[EpochLog]]:
    """Short retraining at ``lr_end`` that also refreshes the BN running statistics."""
    model = model.copy()
    if cfg.fine_tune_epochs == 0:
        return model, []
    logs = _train_loop(model, data, cfg, cfg.fine_tune_epochs, "finetune", lambda e: cfg.lr_end,
                       update=cfg.fine_tune_mode == "full", rng=np.random.default_rng([cfg.seed, 3]))
    return model, logs


@dataclass
class HFPResult:
    baseline: Model
    sparse: Model
    pruned: Model
    final: Model
    plan: PrunePlan
    targets: PruningTargets
    schedule: LambdaSchedule
    base: BaseComplexity
    final_complexity: BaseComplexity
    baseline_logs: list[EpochLog]
    sparsity_logs: list[EpochLog]
    finetune_logs: list[EpochLog]
    baseline_acc: float
    pruned_acc: float
    final_acc: float

    @property
    def achieved_rates(self) -> tuple[float, float]:
        return (1 - self.final_complexity.total_params / self.base.total_params,
                1 - self.final_complexity.total_mults / self.base.total_mults)

    @property
    def final_pruning_loss(self) -> float:
        return hfp.pruning_loss(_snapshot(self.sparse, self.targets.threshold), self.targets, self.base)

    @property
    def logs(self) -> list[EpochLog]:
        return self.baseline_logs + self.sparsity_logs + self.finetune_logs


def _snapshot(model: Model, t: float) -> hfp.ComplexitySnapshot:
    return hfp.snapshot(model.graph, hfp.compute_masks(model.graph, model.gammas(), t))


def run_hfp(graph: NetworkGraph, data: DataSplits, cfg: TrainConfig,
            baseline: Optional[Model] = None, baseline_logs: Optional[list[EpochLog]] = None) -> HFPResult:
    """Baseline (trained unless given), sparsity learning, prune, fine-tune."""
    _check_data(graph, data)
    if baseline is None:
        baseline, baseline_logs = train_baseline(graph, data, cfg)
    baseline_logs = baseline_logs or []
    base = base_complexity(baseline.graph)
    targets = PruningTargets.from_rates(base, cfg.target_params_rate, cfg.target_mults_rate, cfg.threshold)
    if cfg.lambda_target is None:
        # untrained reference so the numerator is the expected initial loss (about ln K)
        lam_target = measure_lambda_target(Model.init(baseline.graph, seed=cfg.seed), data, targets, cfg.batch_size)
    else:
        lam_target = cfg.lambda_target
    schedule = build_schedule(cfg, lam_target)
    log.info("targets P*=%d M*=%d, lambda %s -> %.4f", targets.target_params, targets.target_mults,
             schedule.mode, schedule.target_value)

    sparse, sparsity_logs = sparsity_learn(baseline, data, cfg, targets, schedule)
    plan = make_plan(sparse, cfg.threshold)
    zeroed = zero_inactive(sparse, cfg.threshold)
    pruned = structural_prune(zeroed, plan)
    pruned_acc = pruned.accuracy(data.test.images, data.test.labels)
    final, finetune_logs = fine_tune(pruned, data, cfg)
    return HFPResult(
        baseline=baseline, sparse=sparse, pruned=pruned, final=final, plan=plan, targets=targets,
        schedule=schedule, base=base, final_complexity=base_complexity(final.graph),
        baseline_logs=baseline_logs, sparsity_logs=sparsity_logs, finetune_logs=finetune_logs,
        baseline_acc=baseline.accuracy(data.test.images, data.test.labels),
        pruned_acc=pruned_acc, final_acc=final.accuracy(data.test.images, data.test.labels),
    )
