"""Hardware-aware group pruning, the uniform magnitude-pruning baseline and
sparsity reporting.

A kernel group is the set of ``n_cu`` 2-D kernels that the matrix block
processes side by side in one parallel step: for conv layer ``L``, input
channel ``g`` and filter block ``b`` it is ``kernel[:, :, g, b*n_cu:(b+1)*n_cu]``.
Zeroing a whole group lets the sparsity bypass skip every step of that pass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .config import AccelConfig
from .reference_nn import ConvParams, NetworkSpec, ShapeError, Weights
from .schedule import ScheduleError

log = logging.getLogger(__name__)

SPARSITY_HEADER = ("layer", "weight_sparsity", "group_sparsity")

Masks = dict[str, np.ndarray]
RetrainHook = Callable[[int, Weights, Masks], "Weights | None"]


@dataclass(frozen=True, order=True)
class KernelGroup:
    layer_index: int
    g: int
    filter_block: int
    layer: str = field(compare=False)
    n_cu: int = field(compare=False)
    k: int = field(compare=False)

    @property
    def size(self) -> int:
        return self.k * self.k * self.n_cu

    @property
    def filters(self) -> slice:
        return slice(self.filter_block * self.n_cu, (self.filter_block + 1) * self.n_cu)

    def view(self, codes: np.ndarray) -> np.ndarray:
        """This group's ``(k, k, n_cu)`` slice of a layer's kernel codes."""
        return codes[:, :, self.g, self.filters]


def enumerate_groups(net: NetworkSpec, cfg: AccelConfig | int) -> list[KernelGroup]:
    """Groups of every conv layer, ordered by (layer, input channel, filter block)."""
    n_cu = cfg if isinstance(cfg, int) else cfg.n_cu
    groups = []
    for idx, layer in enumerate(net.conv_layers()):
        if layer.out_channels % n_cu:
            raise ScheduleError(f"{layer.name}: {layer.out_channels} filters not a multiple of n_cu={n_cu}")
        for g in range(layer.in_channels):
            for block in range(layer.out_channels // n_cu):
                groups.append(KernelGroup(idx, g, block, layer.name, n_cu, layer.kernel))
    return groups


def group_score_codes(weights: Weights, group: KernelGroup) -> int:
    """Sum of absolute weight codes of the group (exact integer)."""
    return int(np.abs(group.view(weights[group.layer].kernel.codes).astype(np.int64)).sum())


def score_group(weights: Weights, group: KernelGroup) -> float:
    """Sum of absolute weight values of the group."""
    return group_score_codes(weights, group) * weights[group.layer].kernel.fmt.step


def full_masks(weights: Weights) -> Masks:
    return {name: np.ones(p.kernel.shape, dtype=bool) for name, p in weights.items()}


def apply_masks(weights: Weights, masks: Masks) -> Weights:
    out = dict(weights)
    for name, mask in masks.items():
        params = weights[name]
        if mask.shape != params.kernel.shape:
            raise ShapeError(f"{name}: mask {mask.shape} vs kernel {params.kernel.shape}")
        out[name] = params.with_kernel_codes(np.where(mask, params.kernel.codes, 0))
    return out


def _exact_fraction(x) -> Fraction:
    return Fraction(x).limit_denominator(10**9)


@dataclass
class PruningPlan:
    target_sparsity: float
    epochs: int
    total_groups: int
    unpruned: list[KernelGroup]
    pruned: list[KernelGroup] = field(default_factory=list)
    epoch: int = 0

    @classmethod
    def start(cls, groups: list[KernelGroup], target_sparsity: float, epochs: int) -> PruningPlan:
        if not 0 < target_sparsity <= 1:
            raise ValueError("target_sparsity must be in (0, 1]")
        if epochs < 1:
            raise ValueError("epochs must be >= 1")
        return cls(target_sparsity, epochs, len(groups), list(groups))

    @property
    def target_groups(self) -> int:
        return int(_exact_fraction(self.target_sparsity) * self.total_groups)

    @property
    def groups_per_epoch(self) -> int:
        return self.target_groups // self.epochs

    def quota(self, epoch: int) -> int:
        """Groups moved in ``epoch`` (0-based); the last epoch takes the remainder."""
        if epoch == self.epochs - 1:
            return self.target_groups - self.groups_per_epoch * (self.epochs - 1)
        return self.groups_per_epoch

    @property
    def done(self) -> bool:
        return self.epoch >= self.epochs

    @property
    def group_sparsity(self) -> float:
        return len(self.pruned) / self.total_groups if self.total_groups else 0.0


def masks_for(weights: Weights, pruned: list[KernelGroup]) -> Masks:
    masks = full_masks(weights)
    for grp in pruned:
        grp.view(masks[grp.layer])[...] = False
    return masks


def hapm_step(plan: PruningPlan, weights: Weights) -> tuple[PruningPlan, Weights, Masks]:
    """One epoch: sort unpruned groups by score, move the lowest, zero all pruned."""
    if plan.done:
        raise ValueError("pruning plan already complete")
    ranked = sorted(plan.unpruned, key=lambda grp: (group_score_codes(weights, grp), grp))
    n = plan.quota(plan.epoch)
    new_plan = PruningPlan(plan.target_sparsity, plan.epochs, plan.total_groups,
                           ranked[n:], plan.pruned + ranked[:n], plan.epoch + 1)
    masks = masks_for(weights, new_plan.pruned)
    return new_plan, apply_masks(weights, masks), masks


def _check_hook_output(before: Weights, after: Weights) -> None:
    if set(after) != set(before):
        raise ShapeError("retrain hook changed the set of layers")
    for name, params in after.items():
        if not isinstance(params, ConvParams):
            raise ShapeError(f"retrain hook returned {type(params).__name__} for {name}")
        if params.kernel.shape != before[name].kernel.shape or params.bias.shape != before[name].bias.shape:
            raise ShapeError(f"retrain hook changed the shape of {name}")


@dataclass
class PruneResult:
    weights: Weights
    masks: Masks
    plan: PruningPlan | None = None
    history: list[Masks] = field(default_factory=list)


def run_hapm(weights: Weights, net: NetworkSpec, cfg: AccelConfig | int, target_sparsity: float, epochs: int,
             retrain_hook: RetrainHook | None = None) -> PruneResult:
    """Gradual group pruning; ``retrain_hook(epoch, weights, masks)`` runs after each step."""
    groups = enumerate_groups(net, cfg)
    plan = PruningPlan.start(groups, target_sparsity, epochs)
    history = []
    masks = full_masks(weights)
    while not plan.done:
        plan, weights, masks = hapm_step(plan, weights)
        history.append(masks)
        log.info("hapm epoch %d: %d/%d groups pruned", plan.epoch, len(plan.pruned), plan.total_groups)
        if retrain_hook is not None:
            updated = retrain_hook(plan.epoch - 1, weights, masks)
            if updated is not None:
                _check_hook_output(weights, updated)
                weights = apply_masks(updated, masks)
    return PruneResult(weights, masks, plan, history)


def uniform_prune(weights: Weights, target_sparsity: float, epochs: int,
                  retrain_hook: RetrainHook | None = None) -> PruneResult:
    """Per-layer gradual magnitude pruning.

    After epoch ``e`` (1-based) each layer has at least
    ``ceil(target * e / epochs * n)`` zero weights; ties broken by flat index.
    """
    if not 0 <= target_sparsity <= 1:
        raise ValueError("target_sparsity must be in [0, 1]")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    target = _exact_fraction(target_sparsity)
    masks = full_masks(weights)
    history = []
    for epoch in range(1, epochs + 1):
        new_masks = {}
        for name, params in weights.items():
            codes = params.kernel.codes.ravel()
            n_zero = -(-(target * epoch * codes.size) // epochs)  # ceil on exact rationals
            order = np.argsort(np.abs(codes.astype(np.int64)), kind="stable")
            keep = np.ones(codes.size, dtype=bool)
            keep[order[:int(n_zero)]] = False
            new_masks[name] = keep.reshape(params.kernel.shape) & masks[name]
        masks = new_masks
        weights = apply_masks(weights, masks)
        history.append(masks)
        if retrain_hook is not None:
            updated = retrain_hook(epoch - 1, weights, masks)
            if updated is not None:
                _check_hook_output(weights, updated)
                weights = apply_masks(updated, masks)
    return PruneResult(weights, masks, None, history)


def noop_hook(epoch: int, weights: Weights, masks: Masks) -> None:
    return None


def perturbation_hook(seed: int = 0, max_step: int = 2) -> RetrainHook:
    """Stand-in for a training epoch: nudges every weight code by up to ``max_step``."""
    rng = np.random.default_rng(seed)

    def hook(epoch: int, weights: Weights, masks: Masks) -> Weights:
        out = {}
        for name, params in weights.items():
            codes = params.kernel.codes.astype(np.int64)
            codes = codes + rng.integers(-max_step, max_step + 1, codes.shape)
            out[name] = params.with_kernel_codes(params.kernel.fmt.saturate(codes))
        return out

    return hook


@dataclass(frozen=True)
class SparsityRow:
    layer: str
    weight_sparsity: float  # percent
    group_sparsity: float  # percent

    def csv_fields(self) -> tuple:
        return (self.layer, self.weight_sparsity, self.group_sparsity)


def sparsity_report(weights: Weights, groups: list[KernelGroup]) -> list[SparsityRow]:
    """Per conv layer: percent of zero weights and percent of all-zero groups."""
    by_layer: dict[str, list[KernelGroup]] = {}
    order = []
    for grp in groups:
        if grp.layer not in by_layer:
            by_layer[grp.layer] = []
            order.append(grp.layer)
        by_layer[grp.layer].append(grp)
    rows = []
    for name in order:
        codes = weights[name].kernel.codes
        zero_w = 100.0 * np.count_nonzero(codes == 0) / codes.size
        layer_groups = by_layer[name]
        zero_g = sum(1 for grp in layer_groups if not np.any(grp.view(codes)))
        rows.append(SparsityRow(name, zero_w, 100.0 * zero_g / len(layer_groups)))
    return rows
