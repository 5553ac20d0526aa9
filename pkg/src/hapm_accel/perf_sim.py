"""Event-level timing of the matrix block.

Three stages run as a blocking pipeline over the dispatch stream:

* the controller pushes one step into the data FIFO every ``dispatch_cycles``
  and pays ``refill_cycles`` at the start of every (filter group, input
  channel) pass to reload the circular coefficient buffers;
* the ``n_cu`` matrices consume steps in lock-step; a step costs the maximum
  lane cost, ``N_VALID`` normally or ``dsb_check_cost`` for a lane the Dynamic
  Sparsity Bypass can skip (all-zero kernel block or all-zero input patch);
* steps of the last input channel emit ``n_cu`` disjoint writes that drain at
  ``writeback_ports`` per cycle through an output FIFO of
  ``fifo_depth_out`` elements.

An unbounded data FIFO (``fifo_depth_data=None``) stands for an ideal
controller: data is always ready, as the analytical model assumes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import AccelConfig, LayerGeometry
from .cycle_model import N_VALID
from .reference_nn import NetworkSpec, Weights, count_operations, run_network
from .schedule import DispatchStream, schedule_conv
from .tensor_core import Tensor3, Tensor4

REPORT_HEADER = ("layer", "cycles", "steps", "skipped_lanes", "stall_fifo", "stall_writeback")
SUMMARY_HEADER = ("total_cycles", "seconds", "mean_ms_per_image", "gops")


@dataclass(frozen=True)
class SimConfig:
    accel: AccelConfig = field(default_factory=AccelConfig)
    writeback_ports: int = 1
    dsb_check_cost: int = 1
    pipeline_fill: int | None = None  # default cu_x + cu_y
    dispatch_cycles: int = 1
    refill_cycles: int | None = None  # default k*k of the layer

    def __post_init__(self):
        if self.writeback_ports < 1 or self.dispatch_cycles < 1:
            raise ValueError("writeback_ports and dispatch_cycles must be >= 1")
        if self.dsb_check_cost < 0:
            raise ValueError("dsb_check_cost must be >= 0")
        if self.pipeline_fill is not None and self.pipeline_fill < 1:
            raise ValueError("pipeline_fill must be >= 1")
        if self.refill_cycles is not None and self.refill_cycles < 0:
            raise ValueError("refill_cycles must be >= 0")

    @property
    def fill(self) -> int:
        return self.accel.cu_x + self.accel.cu_y if self.pipeline_fill is None else self.pipeline_fill

    def with_accel(self, **changes) -> SimConfig:
        return replace(self, accel=replace(self.accel, **changes))


@dataclass
class LayerReport:
    layer: str
    cycles: int = 0
    steps: int = 0
    skipped_lanes: int = 0
    stall_fifo: int = 0
    stall_writeback: int = 0

    def add(self, other: LayerReport) -> None:
        self.cycles += other.cycles
        self.steps += other.steps
        self.skipped_lanes += other.skipped_lanes
        self.stall_fifo += other.stall_fifo
        self.stall_writeback += other.stall_writeback

    def csv_fields(self) -> tuple:
        return (self.layer, self.cycles, self.steps, self.skipped_lanes, self.stall_fifo, self.stall_writeback)


@dataclass
class CycleReport:
    """Counters summed over ``images`` inferences."""

    layers: list[LayerReport]
    images: int
    clock_mhz: float
    ops_per_image: int

    @property
    def total_cycles(self) -> int:
        return sum(l.cycles for l in self.layers)

    @property
    def seconds(self) -> float:
        return self.total_cycles / (self.clock_mhz * 1e6)

    @property
    def mean_ms_per_image(self) -> float:
        return 1e3 * self.seconds / self.images if self.images else 0.0

    @property
    def gops(self) -> float:
        return self.ops_per_image * self.images / self.seconds / 1e9 if self.total_cycles else 0.0

    def summary_fields(self) -> tuple:
        return (self.total_cycles, self.seconds, self.mean_ms_per_image, self.gops)


# --- per-step costs ----------------------------------------------------------


def kernel_zero_flags(kernels: Tensor4) -> np.ndarray:
    """``[g, f]`` True where the 2-D kernel is entirely zero."""
    return ~np.any(kernels.codes != 0, axis=(0, 1))


def tile_data_zero_flags(stream: DispatchStream, padded: Tensor3) -> np.ndarray:
    """``[g, tile]`` True where every patch streamed in the tile is all-zero.

    Idle tiles (no systolic calls) are never flagged.
    """
    geom = stream.geom
    k, s, n = geom.k, geom.s, geom.n_i
    nz = (padded.codes != 0).astype(np.int64)
    integral = np.zeros((n + 1, n + 1, nz.shape[2]), dtype=np.int64)
    integral[1:, 1:] = nz.cumsum(0).cumsum(1)
    wins = np.asarray(stream.windows, dtype=np.int64).reshape(-1, 5)
    i1, j1 = wins[:, 0], wins[:, 1]
    i2 = np.minimum(i1 + k, n)
    j2 = np.minimum(j1 + k + s, n)
    counts = integral[i2, j2] - integral[i1, j2] - integral[i2, j1] + integral[i1, j1]
    cum = np.zeros((len(wins) + 1, nz.shape[2]), dtype=np.int64)
    cum[1:] = np.cumsum(counts > 0, axis=0)
    b = stream.tile_bounds
    per_tile = cum[b[1:]] - cum[b[:-1]]
    nonempty = (b[1:] > b[:-1])[:, None]
    return ((per_tile == 0) & nonempty).T


def step_costs(stream: DispatchStream, kernels: Tensor4, padded: Tensor3, cfg: SimConfig):
    """Per-step cost and skippable-lane count, in stream order."""
    geom, n_cu = stream.geom, stream.cfg.n_cu
    shape = (stream.n_filter_groups, geom.n_if, stream.n_tiles)
    if not cfg.accel.dsb_enabled:
        return np.full(shape, N_VALID, dtype=np.int64).ravel(), np.zeros(int(np.prod(shape)), dtype=np.int64)
    kz = kernel_zero_flags(kernels).reshape(geom.n_if, stream.n_filter_groups, n_cu)
    lanes_kz = kz.sum(axis=2).T  # [fb, g]
    dz = tile_data_zero_flags(stream, padded)  # [g, t]
    skipped = np.where(dz[None, :, :], n_cu, lanes_kz[:, :, None])
    skippable = skipped == n_cu
    cost = np.where(skippable, cfg.dsb_check_cost, N_VALID)
    return cost.astype(np.int64).ravel(), skipped.astype(np.int64).ravel()


def _pipeline(cost, is_out, produce, depth, out_slots, drain):
    """Blocking three-stage pipeline; returns (cycles, stall_fifo, stall_writeback)."""
    c_free = 0
    p_end = 0
    w_free = 0
    starts = []
    w_starts = []
    stall_fifo = stall_wb = 0
    for n, c in enumerate(cost):
        start = c_free
        if depth is not None and n:
            slot = starts[n - depth] if n >= depth else 0
            p_end = (p_end if p_end > slot else slot) + produce[n]
            if p_end > start:
                stall_fifo += p_end - start
                start = p_end
        if is_out[n]:
            m = len(w_starts)
            if out_slots is not None and m >= out_slots:
                gate = w_starts[m - out_slots]
                if gate > start:
                    stall_wb += gate - start
                    start = gate
            ws = w_free if w_free > start else start
            w_starts.append(ws)
            w_free = ws + drain
        starts.append(start)
        c_free = start + c
    if w_free > c_free:
        stall_wb += w_free - c_free
    return max(c_free, w_free), stall_fifo, stall_wb


def simulate_layer(stream: DispatchStream, kernels: Tensor4, padded_input: Tensor3, cfg: SimConfig,
                   name: str = "conv") -> LayerReport:
    """Cycles for one conv layer on one input; ``padded_input`` includes padding."""
    geom, accel = stream.geom, cfg.accel
    if accel.n_cu != stream.cfg.n_cu:
        raise ValueError("stream scheduled for a different n_cu")
    cost, skipped = step_costs(stream, kernels, padded_input, cfg)
    is_out = stream.is_output_step().tolist()
    refill = geom.k * geom.k if cfg.refill_cycles is None else cfg.refill_cycles
    produce = np.full(len(cost), cfg.dispatch_cycles, dtype=np.int64)
    produce[:: stream.n_tiles] += refill
    out_slots = None if accel.fifo_depth_out is None else max(1, accel.fifo_depth_out // accel.n_cu)
    drain = math.ceil(accel.n_cu / cfg.writeback_ports)
    cycles, stall_fifo, stall_wb = _pipeline(cost.tolist(), is_out, produce.tolist(),
                                             accel.fifo_depth_data, out_slots, drain)
    return LayerReport(name, cycles + cfg.fill, len(cost), int(skipped.sum()), stall_fifo, stall_wb)


def _non_conv_cycles(layer, net: NetworkSpec) -> int:
    if layer.kind in ("add", "pool"):
        x, y, c = net.shape_of(layer.name)
        return x * y * c
    return 0  # activations are applied on the producing layer's write path


def simulate_network(net: NetworkSpec, weights: Weights, cfg: SimConfig, images: list[Tensor3]) -> CycleReport:
    """Simulate every image; layer counters are summed over images."""
    accel = cfg.accel
    streams = {}
    reports = {l.name: LayerReport(l.name) for l in net.layers}
    for layer in net.conv_layers():
        size = net.shape_of(layer.inputs[0])[0] + 2 * layer.padding
        streams[layer.name] = schedule_conv(layer, accel, size)
    for image in images:
        tensors = run_network(net, weights, image, keep_all=True)
        for layer in net.layers:
            if layer.kind == "conv":
                padded = tensors[layer.inputs[0]].padded(layer.padding)
                rep = simulate_layer(streams[layer.name], weights[layer.name].kernel, padded, cfg, layer.name)
                reports[layer.name].add(rep)
            else:
                reports[layer.name].cycles += _non_conv_cycles(layer, net)
    return CycleReport(list(reports.values()), len(images), accel.clock_mhz, count_operations(net).total)


def simulate_geometry(geom: LayerGeometry, kernels: Tensor4, padded_input: Tensor3, cfg: SimConfig) -> LayerReport:
    return simulate_layer(schedule_conv(geom, cfg.accel), kernels, padded_input, cfg)


@dataclass(frozen=True)
class RunSummary:
    """Summary block of a saved cycle report."""

    total_cycles: int
    seconds: float
    mean_ms_per_image: float
    gops: float

    @classmethod
    def of(cls, report: CycleReport) -> RunSummary:
        return cls(*report.summary_fields())


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    mean_ms_per_image: float
    gops: float
    speedup: float


COMPARE_HEADER = ("label", "mean_ms_per_image", "gops", "speedup")


def compare_runs(reports: list[tuple[str, CycleReport | RunSummary]]) -> list[ComparisonRow]:
    """Mean time, GOPs and speedup relative to the first report, in input order."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    base = reports[0][1].mean_ms_per_image
    return [ComparisonRow(label, r.mean_ms_per_image, r.gops, base / r.mean_ms_per_image)
            for label, r in reports]
