"""Dispatch order of the matrix block and its functional evaluation.

A layer is processed filter group by filter group (``n_cu`` output channels
at a time, one per computation-unit matrix), then input channel by input
channel, then over the output plane. One call of the systolic array
(:func:`sys_array_eval`) produces two horizontally adjacent outputs from a
``k x (k + s)`` input patch. The calls of one (filter group, input channel)
pass are dealt, in order, into ``p_x * p_y`` parallel steps, the time slots
of the analytical cycle model.

Bias seeds the partial sum on the first input channel and the output plane is
written on the last one; intermediate channels go through a temporal matrix
holding one partial-sum plane per lane.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, TextIO

import numpy as np

from .config import AccelConfig, LayerGeometry
from .cycle_model import min_cycles
from .reference_nn import Conv
from .tensor_core import Tensor3, Tensor4, bias_to_acc, check_accumulator, requantize_accumulator


class ScheduleError(ValueError):
    pass


class Window(NamedTuple):
    """One systolic-array call: input origin (i, j) and output origin (p, q)."""

    i: int
    j: int
    p: int
    q: int
    n_out: int  # 2, or 1 for the trailing column of an odd-width output


@dataclass(frozen=True)
class ParallelStep:
    f: int
    g: int
    tile: int
    windows: tuple[Window, ...]
    presum_source: str  # "bias" | "temporal"
    dest: str  # "temporal" | "output"

    def lanes(self, n_cu: int) -> range:
        return range(self.f, self.f + n_cu)


@dataclass(frozen=True)
class DispatchStream:
    """Ordered steps of one layer, stored compactly and expanded on iteration."""

    geom: LayerGeometry
    cfg: AccelConfig
    windows: tuple[Window, ...]
    tile_bounds: np.ndarray = field(repr=False)
    grouped_by_cycle_model: bool = True

    @property
    def n_tiles(self) -> int:
        return len(self.tile_bounds) - 1

    @property
    def n_filter_groups(self) -> int:
        return self.geom.n_of // self.cfg.n_cu

    def __len__(self) -> int:
        return self.n_filter_groups * self.geom.n_if * self.n_tiles

    def tile_windows(self, tile: int) -> tuple[Window, ...]:
        return self.windows[self.tile_bounds[tile]:self.tile_bounds[tile + 1]]

    def __iter__(self) -> Iterator[ParallelStep]:
        tiles = [self.tile_windows(t) for t in range(self.n_tiles)]
        last_g = self.geom.n_if - 1
        for fb in range(self.n_filter_groups):
            f = fb * self.cfg.n_cu
            for g in range(self.geom.n_if):
                src = "bias" if g == 0 else "temporal"
                dest = "output" if g == last_g else "temporal"
                for t, wins in enumerate(tiles):
                    yield ParallelStep(f, g, t, wins, src, dest)

    def is_output_step(self) -> np.ndarray:
        """Per-step flag in stream order: True where results go to the output plane."""
        flags = np.zeros((self.n_filter_groups, self.geom.n_if, self.n_tiles), dtype=bool)
        flags[:, -1, :] = True
        return flags.ravel()


def pass_windows(geom: LayerGeometry) -> tuple[Window, ...]:
    """Systolic-array calls of one pass, rows outer, column pairs inner."""
    n_o = geom.n_o
    wins = []
    for p in range(n_o):
        for q in range(0, n_o, 2):
            wins.append(Window(p * geom.s, q * geom.s, p, q, min(2, n_o - q)))
    return tuple(wins)


def schedule_conv(layer: Conv | LayerGeometry, cfg: AccelConfig, padded_size: int | None = None) -> DispatchStream:
    """Dispatch stream for a conv layer.

    ``layer`` is a :class:`LayerGeometry` or a :class:`Conv` plus the padded
    input size. Layers the cycle model cannot fit (array too short for the
    kernel overlap) fall back to one systolic call per step.
    """
    if isinstance(layer, LayerGeometry):
        geom = layer
    else:
        if padded_size is None:
            raise ScheduleError("padded_size required when scheduling a Conv spec")
        geom = LayerGeometry(padded_size, layer.in_channels, layer.out_channels, layer.kernel, layer.stride)
    if geom.n_of % cfg.n_cu:
        raise ScheduleError(f"n_of={geom.n_of} is not a multiple of n_cu={cfg.n_cu}")
    wins = pass_windows(geom)
    est = min_cycles(geom, cfg)
    if est.feasible:
        n_tiles = est.tiles
        grouped = True
    else:
        n_tiles = len(wins)
        grouped = False
    bounds = (np.arange(n_tiles + 1, dtype=np.int64) * len(wins)) // n_tiles
    return DispatchStream(geom, cfg, wins, bounds, grouped)


def sys_array_eval(patch, kernel, presum1, presum2, stride: int = 1):
    """Two adjacent convolution outputs from one ``k x (k + stride)`` patch.

    ``kernel`` may be ``(k, k)`` or a lane batch ``(k, k, L)``; presums are
    accumulator values (scalars or length-L). Exact integer arithmetic.
    """
    patch = np.asarray(patch, dtype=np.int64)
    kernel = np.asarray(kernel, dtype=np.int64)
    k = kernel.shape[0]
    if kernel.shape[1] != k or patch.shape != (k, k + stride):
        raise ScheduleError(f"patch {patch.shape} / kernel {kernel.shape} mismatch for stride {stride}")
    out1 = np.tensordot(patch[:, :k], kernel, axes=([0, 1], [0, 1])) + presum1
    out2 = np.tensordot(patch[:, stride:stride + k], kernel, axes=([0, 1], [0, 1])) + presum2
    check_accumulator(out1)
    check_accumulator(out2)
    return out1, out2


@dataclass
class ExecutionTrace:
    """Write/read counters filled by :func:`execute_schedule`."""

    output_writes: np.ndarray = None
    temporal_reads: np.ndarray = None


def execute_schedule(inp: Tensor3, kernels: Tensor4, bias, layer: Conv | LayerGeometry, cfg: AccelConfig,
                     stream: DispatchStream | None = None, trace: ExecutionTrace | None = None) -> Tensor3:
    """Run a conv layer through the dispatch stream.

    ``inp`` is the already padded input. The result is requantized only when
    written to the output plane.
    """
    if inp.size_x != inp.size_y:
        raise ScheduleError("accelerator inputs must be square")
    if stream is None:
        stream = schedule_conv(layer if isinstance(layer, LayerGeometry) else layer, cfg, inp.size_x)
    geom = stream.geom
    if inp.shape != (geom.n_i, geom.n_i, geom.n_if):
        raise ScheduleError(f"input {inp.shape} does not match scheduled geometry {geom}")
    if kernels.shape != (geom.k, geom.k, geom.n_if, geom.n_of):
        raise ScheduleError(f"kernels {kernels.shape} do not match geometry {geom}")
    k, s, n_cu, n_o = geom.k, geom.s, stream.cfg.n_cu, geom.n_o
    bias = np.zeros(geom.n_of, dtype=np.int64) if bias is None else np.asarray(bias, dtype=np.int64)
    bias_acc = bias_to_acc(bias)

    # zero columns on the right so the trailing single-output patch keeps its k x (k+s) shape
    x = np.pad(inp.codes.astype(np.int64), ((0, 0), (0, s), (0, 0)))
    w = kernels.codes.astype(np.int64)
    out = np.zeros((n_o, n_o, geom.n_of), dtype=np.int64)
    temporal = np.zeros((n_o, n_o, n_cu), dtype=np.int64)
    if trace is not None:
        trace.output_writes = np.zeros((n_o, n_o, geom.n_of), dtype=np.int64)
        trace.temporal_reads = np.zeros((n_o, n_o, geom.n_of), dtype=np.int64)

    for step in stream:
        lanes = slice(step.f, step.f + n_cu)
        kernel = w[:, :, step.g, lanes]
        for win in step.windows:
            patch = x[win.i:win.i + k, win.j:win.j + k + s, step.g]
            p, q = win.p, win.q
            if step.presum_source == "bias":
                pre1 = pre2 = bias_acc[lanes]
            else:
                pre1 = temporal[p, q]
                pre2 = temporal[p, q + 1] if win.n_out == 2 else 0
                if trace is not None:
                    trace.temporal_reads[p, q:q + win.n_out, lanes] += 1
            out1, out2 = sys_array_eval(patch, kernel, pre1, pre2, s)
            if step.dest == "output":
                out[p, q, lanes] = requantize_accumulator(out1, inp.fmt)
                if win.n_out == 2:
                    out[p, q + 1, lanes] = requantize_accumulator(out2, inp.fmt)
                if trace is not None:
                    trace.output_writes[p, q:q + win.n_out, lanes] += 1
            else:
                temporal[p, q] = out1
                if win.n_out == 2:
                    temporal[p, q + 1] = out2
    return Tensor3(out, inp.fmt)


def write_trace(stream: DispatchStream, fh: TextIO) -> None:
    """One line per step: ``f g i j dest`` (i, j of the step's first call, ``-`` if idle)."""
    for step in stream:
        if step.windows:
            i, j = step.windows[0].i, step.windows[0].j
        else:
            i = j = "-"
        fh.write(f"{step.f} {step.g} {i} {j} {step.dest}\n")
