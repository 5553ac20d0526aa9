"""Closed-form minimum cycle count of a conv layer and the design-space sweep
built on it."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

from .config import AccelConfig, LayerGeometry, conv_geometries
from .reference_nn import NetworkSpec, count_operations

# cycles for one matrix to produce valid output (two 3x3 convolutions per pass)
N_VALID = 4

EXPLORE_HEADER = ("n_cu", "cu_x", "cu_y", "dsps", "clock_mhz", "total_cycles", "gops")


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class CycleEstimate:
    feasible: bool
    min_cycles: int | None
    k_o: int
    p_x: int
    g_cu: int
    g_ky: Fraction
    p_y: int | None
    ratio: int | None
    padded_n_of: int | None = None
    warnings: tuple[str, ...] = field(default=())

    @property
    def tiles(self) -> int | None:
        """Dispatch steps per (filter group, input channel) pass."""
        if not self.feasible:
            return None
        return self.p_x * self.p_y


def min_cycles(geom: LayerGeometry, cfg: AccelConfig, pad_channels: bool = False) -> CycleEstimate:
    """Theoretical minimum cycles for one layer.

    With ``pad_channels`` a non-natural ``n_of / n_cu`` is rounded up (the
    layer is padded with zero filters) instead of being reported infeasible.
    """
    notes = []
    k_o = max(abs(geom.k - geom.s), 1)
    num = geom.n_i - k_o
    if num % geom.s:
        notes.append(f"p_x: ({geom.n_i}-{k_o})/{geom.s} not integral, floored")
    p_x = num // geom.s
    if p_x < 1:
        notes.append("p_x clamped to 1")
        p_x = 1
    g_cu = (cfg.cu_h - k_o) // geom.s
    g_ky = Fraction(geom.n_i, k_o) - geom.s

    padded = None
    if geom.n_of % cfg.n_cu:
        if pad_channels:
            padded = -(-geom.n_of // cfg.n_cu) * cfg.n_cu
            ratio = padded // cfg.n_cu
            notes.append(f"n_of {geom.n_of} padded to {padded}")
        else:
            notes.append(f"n_of {geom.n_of} not a multiple of n_cu {cfg.n_cu}")
            ratio = None
    else:
        ratio = geom.n_of // cfg.n_cu

    if g_cu < 1:
        notes.append(f"array height {cfg.cu_h} too short for kernel overlap {k_o} at stride {geom.s}")
        return CycleEstimate(False, None, k_o, p_x, g_cu, g_ky, None, ratio, padded, tuple(notes))
    p_y = math.ceil(g_ky / g_cu)
    if p_y < 1:
        notes.append("p_y clamped to 1")
        p_y = 1
    if ratio is None:
        return CycleEstimate(False, None, k_o, p_x, g_cu, g_ky, p_y, None, padded, tuple(notes))
    cycles = N_VALID * p_x * p_y * geom.n_if * ratio
    return CycleEstimate(True, cycles, k_o, p_x, g_cu, g_ky, p_y, ratio, padded, tuple(notes))


@dataclass(frozen=True)
class TheoreticalPerf:
    total_cycles: int
    seconds: float
    gops: float
    layers: tuple[tuple[str, CycleEstimate], ...]


def network_cycles(net: NetworkSpec, cfg: AccelConfig, pad_channels: bool = False) -> list[tuple[str, CycleEstimate]]:
    return [(layer.name, min_cycles(geom, cfg, pad_channels)) for layer, geom in conv_geometries(net)]


def theoretical_gops(net: NetworkSpec, cfg: AccelConfig, pad_channels: bool = False) -> TheoreticalPerf:
    """Peak GOPs at ``cfg.clock_mhz``; non-conv layers cost no cycles here."""
    layers = network_cycles(net, cfg, pad_channels)
    bad = [name for name, est in layers if not est.feasible]
    if bad:
        raise InfeasibleConfig(f"layers infeasible under {cfg}: {bad}")
    total = sum(est.min_cycles for _, est in layers)
    seconds = total / (cfg.clock_mhz * 1e6)
    ops = count_operations(net).total
    return TheoreticalPerf(total, seconds, ops / seconds / 1e9, tuple(layers))


@dataclass(frozen=True)
class ExploreRow:
    n_cu: int
    cu_x: int
    cu_y: int
    dsps: int
    clock_mhz: float
    total_cycles: int | None
    gops: float | None
    padded: bool = False

    @property
    def feasible(self) -> bool:
        return self.total_cycles is not None

    def csv_fields(self) -> tuple:
        return (self.n_cu, self.cu_x, self.cu_y, self.dsps, self.clock_mhz,
                "" if self.total_cycles is None else self.total_cycles,
                "" if self.gops is None else self.gops)


def explore(net: NetworkSpec, n_cu_values, cu_x_values, cu_y_values, clocks=(100.0,),
            pad_channels: bool = True) -> list[ExploreRow]:
    """One row per configuration, sorted by (n_cu, cu_x, cu_y, clock).

    Infeasible configurations keep their row with empty cycles/GOPs.
    """
    rows = []
    space = sorted(set(itertools.product(n_cu_values, cu_x_values, cu_y_values, clocks)))
    if not space:
        raise ValueError("empty design space")
    for n_cu, cu_x, cu_y, clock in space:
        cfg = AccelConfig(n_cu=n_cu, cu_x=cu_x, cu_y=cu_y, clock_mhz=float(clock))
        layers = network_cycles(net, cfg, pad_channels)
        padded = any(est.padded_n_of is not None for _, est in layers)
        try:
            perf = theoretical_gops(net, cfg, pad_channels)
        except InfeasibleConfig:
            rows.append(ExploreRow(n_cu, cu_x, cu_y, cfg.dsps, float(clock), None, None, padded))
            continue
        rows.append(ExploreRow(n_cu, cu_x, cu_y, cfg.dsps, float(clock), perf.total_cycles, perf.gops, padded))
    return rows
