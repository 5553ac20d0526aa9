"""Hardware parameterization and per-layer geometry shared by the schedule,
the analytical cycle model and the simulator."""
from __future__ import annotations

from dataclasses import dataclass

from .reference_nn import Conv, NetworkSpec


@dataclass(frozen=True)
class AccelConfig:
    """Matrix-block configuration.

    ``fifo_depth_data`` counts dispatch steps, ``fifo_depth_out`` counts output
    elements; ``None`` means unbounded.
    """

    n_cu: int = 12
    cu_x: int = 2
    cu_y: int = 3
    fifo_depth_data: int | None = 8
    fifo_depth_out: int | None = 32
    dsb_enabled: bool = True
    clock_mhz: float = 100.0

    def __post_init__(self):
        if self.n_cu < 1 or self.cu_x < 1 or self.cu_y < 1:
            raise ValueError("n_cu, cu_x and cu_y must be >= 1")
        for depth in (self.fifo_depth_data, self.fifo_depth_out):
            if depth is not None and depth < 1:
                raise ValueError("FIFO depths must be >= 1 (or None for unbounded)")
        if self.clock_mhz <= 0:
            raise ValueError("clock must be positive")

    @property
    def cu_h(self) -> int:
        return self.cu_x + self.cu_y - 1

    @property
    def dsps(self) -> int:
        return self.n_cu * self.cu_x * self.cu_y


@dataclass(frozen=True)
class LayerGeometry:
    """Square conv layer as seen by the accelerator; ``n_i`` already includes padding."""

    n_i: int
    n_if: int
    n_of: int
    k: int
    s: int = 1

    def __post_init__(self):
        if min(self.n_i, self.n_if, self.n_of, self.k, self.s) < 1:
            raise ValueError(f"invalid geometry {self}")
        if self.n_i < self.k:
            raise ValueError(f"input {self.n_i} smaller than kernel {self.k}")

    @property
    def n_o(self) -> int:
        return (self.n_i - self.k) // self.s + 1

    @classmethod
    def from_conv(cls, layer: Conv, input_size: int) -> LayerGeometry:
        return cls(input_size + 2 * layer.padding, layer.in_channels, layer.out_channels, layer.kernel, layer.stride)


def conv_geometries(net: NetworkSpec) -> list[tuple[Conv, LayerGeometry]]:
    out = []
    for layer in net.conv_layers():
        size = net.shape_of(layer.inputs[0])[0]
        out.append((layer, LayerGeometry.from_conv(layer, size)))
    return out
