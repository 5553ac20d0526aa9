"""Bit-exact reference layers and a small network-graph executor.

Everything here is the ground truth the scheduled accelerator path is
compared against.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Union

import numpy as np

from .tensor_core import (
    ACC_FRAC,
    ACT_FMT,
    WEIGHT_FMT,
    Tensor3,
    Tensor4,
    bias_to_acc,
    check_accumulator,
    requantize_accumulator,
    shift_round_half_even,
)


class ShapeError(ValueError):
    pass


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Conv:
    name: str
    inputs: tuple[str, ...]
    kernel: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int
    has_bias: bool = True
    kind = "conv"

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"{self.name}: invalid kernel/stride/padding")
        if len(self.inputs) != 1:
            raise ValueError(f"{self.name}: conv takes exactly one input")


@dataclass(frozen=True)
class Pool:
    name: str
    inputs: tuple[str, ...]
    window: int
    stride: int
    mode: str = "max"
    kind = "pool"

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError(f"{self.name}: invalid window/stride")
        if self.mode not in ("max", "average"):
            raise ValueError(f"{self.name}: unknown pool mode {self.mode!r}")


@dataclass(frozen=True)
class Add:
    name: str
    inputs: tuple[str, ...]
    kind = "add"

    def __post_init__(self):
        if len(self.inputs) != 2:
            raise ValueError(f"{self.name}: add takes two inputs")


@dataclass(frozen=True)
class Activation:
    name: str
    inputs: tuple[str, ...]
    mode: str = "relu"
    kind = "activation"

    def __post_init__(self):
        if self.mode not in ("relu", "identity"):
            raise ValueError(f"{self.name}: unknown activation {self.mode!r}")


LayerSpec = Union[Conv, Pool, Add, Activation]
_KINDS = {cls.kind: cls for cls in (Conv, Pool, Add, Activation)}


@dataclass(frozen=True)
class ConvParams:
    """Kernel bank plus per-output-channel bias codes (weight format)."""

    kernel: Tensor4
    bias: np.ndarray = None

    def __post_init__(self):
        bias = self.bias
        if bias is None:
            bias = np.zeros(self.kernel.out_channels, dtype=np.int8)
        bias = np.asarray(bias)
        if bias.shape != (self.kernel.out_channels,):
            raise ShapeError(f"bias length {bias.shape} != out_channels {self.kernel.out_channels}")
        if bias.size and (bias.min() < WEIGHT_FMT.min_code or bias.max() > WEIGHT_FMT.max_code):
            raise ValueError("bias codes outside weight format range")
        bias = bias.astype(np.int8)
        bias.flags.writeable = False
        object.__setattr__(self, "bias", bias)

    def with_kernel_codes(self, codes) -> ConvParams:
        return ConvParams(Tensor4(codes, self.kernel.fmt), self.bias)


Weights = dict[str, ConvParams]


@dataclass
class NetworkSpec:
    """Layers in topological order; tensors are named by the layer producing them."""

    name: str
    input_name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    output_name: str = None
    _shapes: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if self.output_name is None and self.layers:
            self.output_name = self.layers[-1].name
        self._shapes = self._propagate_shapes()

    def _propagate_shapes(self) -> dict[str, tuple[int, int, int]]:
        shapes = {self.input_name: self.input_shape}
        for layer in self.layers:
            if layer.name in shapes:
                raise NetworkError(f"duplicate tensor name {layer.name!r}")
            for src in layer.inputs:
                if src not in shapes:
                    raise NetworkError(f"{layer.name}: input {src!r} undefined (graph order or cycle)")
            shapes[layer.name] = layer_output_shape(layer, [shapes[s] for s in layer.inputs])
        if self.output_name not in shapes:
            raise NetworkError(f"output {self.output_name!r} not produced")
        consumed = {src for layer in self.layers for src in layer.inputs}
        dangling = [l.name for l in self.layers if l.name not in consumed and l.name != self.output_name]
        if dangling:
            raise NetworkError(f"tensors never consumed: {dangling}")
        return shapes

    def shape_of(self, tensor: str) -> tuple[int, int, int]:
        return self._shapes[tensor]

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self._shapes[self.output_name]

    def conv_layers(self) -> list[Conv]:
        return [l for l in self.layers if l.kind == "conv"]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            d = asdict(l)
            d["inputs"] = list(d["inputs"])
            layers.append({"kind": l.kind, **d})
        return {
            "name": self.name,
            "input": {"name": self.input_name, "shape": list(self.input_shape)},
            "output": self.output_name,
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            if kind not in _KINDS:
                raise NetworkError(f"unknown layer kind {kind!r}")
            entry["inputs"] = tuple(entry["inputs"])
            layers.append(_KINDS[kind](**entry))
        return cls(d["name"], d["input"]["name"], tuple(d["input"]["shape"]), layers, d.get("output"))


def layer_output_shape(layer: LayerSpec, in_shapes: list[tuple[int, int, int]]) -> tuple[int, int, int]:
    if layer.kind == "conv":
        x, y, c = in_shapes[0]
        if x != y:
            raise ShapeError(f"{layer.name}: accelerator convs need square inputs, got {x}x{y}")
        if c != layer.in_channels:
            raise ShapeError(f"{layer.name}: expects {layer.in_channels} channels, got {c}")
        n = x + 2 * layer.padding
        if n < layer.kernel:
            raise ShapeError(f"{layer.name}: padded input {n} smaller than kernel {layer.kernel}")
        out = (n - layer.kernel) // layer.stride + 1
        return (out, out, layer.out_channels)
    if layer.kind == "pool":
        x, y, c = in_shapes[0]
        for size in (x, y):
            if size < layer.window or (size - layer.window) % layer.stride:
                raise ShapeError(f"{layer.name}: window {layer.window}/stride {layer.stride} leaves a partial window on {size}")
        return ((x - layer.window) // layer.stride + 1, (y - layer.window) // layer.stride + 1, c)
    if layer.kind == "add":
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"{layer.name}: add shapes differ {in_shapes[0]} vs {in_shapes[1]}")
        return in_shapes[0]
    return in_shapes[0]


def load_network_json(path) -> NetworkSpec:
    with open(path) as fh:
        return NetworkSpec.from_dict(json.load(fh))


def builtin_network(name: str = "cifar_resnet21") -> NetworkSpec:
    """Networks shipped under ``hapm_accel/data``."""
    text = resources.files("hapm_accel.data").joinpath(f"{name}.json").read_text()
    return NetworkSpec.from_dict(json.loads(text))


# --- layers -----------------------------------------------------------------


def conv2d_accumulate(inp: Tensor3, kernels: Tensor4, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Raw accumulator values (bias included) of a convolution, before requantization."""
    if kernels.k_x != kernels.k_y:
        raise ShapeError("kernel must be square")
    if inp.channels != kernels.in_channels:
        raise ShapeError(f"input has {inp.channels} channels, kernels expect {kernels.in_channels}")
    if inp.size_x != inp.size_y:
        raise ShapeError("input must be square")
    k = kernels.k_x
    x = inp.padded(padding).codes.astype(np.int64)
    n = x.shape[0]
    if n < k:
        raise ShapeError(f"padded input {n} smaller than kernel {k}")
    n_o = (n - k) // stride + 1
    w = kernels.codes.astype(np.int64)
    bias = np.zeros(kernels.out_channels, dtype=np.int64) if bias is None else np.asarray(bias)
    if bias.shape != (kernels.out_channels,):
        raise ShapeError("bias length must equal out_channels")
    acc = np.zeros((n_o, n_o, kernels.out_channels), dtype=np.int64)
    span = (n_o - 1) * stride + 1
    for ik in range(k):
        for jk in range(k):
            window = x[ik:ik + span:stride, jk:jk + span:stride, :]
            acc += window @ w[ik, jk]
    acc += bias_to_acc(bias)
    check_accumulator(acc)
    return acc


def conv2d_reference(inp: Tensor3, kernels: Tensor4, bias=None, stride: int = 1, padding: int = 0) -> Tensor3:
    acc = conv2d_accumulate(inp, kernels, bias, stride, padding)
    return Tensor3(requantize_accumulator(acc, inp.fmt), inp.fmt)


def pool(inp: Tensor3, window: int, stride: int, mode: str = "max") -> Tensor3:
    """Max or average pooling; partial trailing windows are rejected."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    for size in (inp.size_x, inp.size_y):
        if size < window or (size - window) % stride:
            raise ValueError(f"window {window}/stride {stride} does not tile size {size}")
    x = inp.codes.astype(np.int64)
    ox = (inp.size_x - window) // stride + 1
    oy = (inp.size_y - window) // stride + 1
    views = [
        x[i:i + (ox - 1) * stride + 1:stride, j:j + (oy - 1) * stride + 1:stride, :]
        for i in range(window)
        for j in range(window)
    ]
    stack = np.stack(views)
    if mode == "max":
        out = stack.max(axis=0)
    elif mode == "average":
        n = window * window
        total = stack.sum(axis=0)
        if n & (n - 1) == 0:
            out = shift_round_half_even(total, n.bit_length() - 1)
        else:
            # exact rational division, half-to-even on the remainder
            q, r = np.divmod(total, n)
            out = q + ((2 * r > n) | ((2 * r == n) & (q % 2 == 1)))
        out = inp.fmt.saturate(out)
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return Tensor3(out, inp.fmt)


def add_elementwise(a: Tensor3, b: Tensor3) -> Tensor3:
    if a.shape != b.shape or a.fmt != b.fmt:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
    total = a.codes.astype(np.int64) + b.codes.astype(np.int64)
    return Tensor3(a.fmt.saturate(total), a.fmt)


def relu(a: Tensor3) -> Tensor3:
    return Tensor3(np.maximum(a.codes, 0), a.fmt)


def run_layer(layer: LayerSpec, inputs: list[Tensor3], weights: Weights) -> Tensor3:
    if layer.kind == "conv":
        if layer.name not in weights:
            raise NetworkError(f"missing weights for conv layer {layer.name!r}")
        params = weights[layer.name]
        if params.kernel.shape != (layer.kernel, layer.kernel, layer.in_channels, layer.out_channels):
            raise ShapeError(f"{layer.name}: kernel shape {params.kernel.shape} does not match layer")
        return conv2d_reference(inputs[0], params.kernel, params.bias, layer.stride, layer.padding)
    if layer.kind == "pool":
        return pool(inputs[0], layer.window, layer.stride, layer.mode)
    if layer.kind == "add":
        return add_elementwise(inputs[0], inputs[1])
    if layer.mode == "relu":
        return relu(inputs[0])
    return inputs[0]


def run_network(net: NetworkSpec, weights: Weights, inp: Tensor3, keep_all: bool = False,
                layer_fn: Callable = run_layer):
    """Execute ``net`` in its stored topological order.

    With ``keep_all`` the dict of every named tensor is returned instead of
    only the output. ``layer_fn`` lets callers substitute a layer evaluator.
    """
    if inp.shape != net.input_shape:
        raise ShapeError(f"input shape {inp.shape} != network input {net.input_shape}")
    missing = [l.name for l in net.conv_layers() if l.name not in weights]
    if missing:
        raise NetworkError(f"missing weights for conv layers {missing}")
    tensors = {net.input_name: inp}
    remaining_uses = {}
    for layer in net.layers:
        for src in layer.inputs:
            remaining_uses[src] = remaining_uses.get(src, 0) + 1
    for layer in net.layers:
        out = layer_fn(layer, [tensors[s] for s in layer.inputs], weights)
        if out.shape != net.shape_of(layer.name):
            raise ShapeError(f"{layer.name}: produced {out.shape}, expected {net.shape_of(layer.name)}")
        tensors[layer.name] = out
        if not keep_all:
            for src in layer.inputs:
                remaining_uses[src] -= 1
                if remaining_uses[src] == 0 and src != net.output_name:
                    del tensors[src]
    return tensors if keep_all else tensors[net.output_name]


@dataclass(frozen=True)
class OpCount:
    conv_ops: int
    add_ops: int
    pool_ops: int
    convention: str = (
        "2 ops per conv MACC; 1 op per add output element; "
        "window*window ops per pool output element; activations free"
    )

    @property
    def total(self) -> int:
        return self.conv_ops + self.add_ops + self.pool_ops

    @property
    def gop(self) -> float:
        return self.total / 1e9


def count_operations(net: NetworkSpec) -> OpCount:
    conv = add = pooled = 0
    for layer in net.layers:
        ox, oy, oc = net.shape_of(layer.name)
        if layer.kind == "conv":
            conv += 2 * ox * oy * oc * layer.in_channels * layer.kernel * layer.kernel
        elif layer.kind == "add":
            add += ox * oy * oc
        elif layer.kind == "pool":
            pooled += ox * oy * oc * layer.window * layer.window
    return OpCount(conv, add, pooled)


def random_weights(net: NetworkSpec, seed: int = 0, gain: float = 2.0, bias_std: float = 0.05,
                   centered: bool = True, std: float | None = None) -> Weights:
    """Dense random weights quantized to the weight format.

    Kernels are drawn N(0, gain / fan_in) (He scaling for ``gain=2``), or with
    the same ``std`` in every layer when given. With ``centered`` every filter
    is shifted to zero sum, which keeps post-ReLU channels alive the way batch
    normalization does in a trained network.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for layer in net.conv_layers():
        fan_in = layer.kernel * layer.kernel * layer.in_channels
        sigma = np.sqrt(gain / fan_in) if std is None else std
        w = rng.normal(0.0, sigma, (layer.kernel, layer.kernel, layer.in_channels, layer.out_channels))
        if centered:
            w -= w.mean(axis=(0, 1, 2), keepdims=True)
        b = rng.normal(0.0, bias_std, layer.out_channels) if layer.has_bias else np.zeros(layer.out_channels)
        weights[layer.name] = ConvParams(Tensor4.from_real(w), Tensor4.from_real(b.reshape(1, 1, 1, -1)).codes.ravel())
    return weights


def float_to_weights(net: NetworkSpec, arrays: dict[str, np.ndarray]) -> Weights:
    """Quantize float kernels/biases keyed ``"<layer>.kernel"`` / ``"<layer>.bias"``."""
    weights = {}
    for layer in net.conv_layers():
        key = f"{layer.name}.kernel"
        if key not in arrays:
            raise NetworkError(f"missing float kernel {key!r}")
        kernel = Tensor4.from_real(arrays[key])
        bias_key = f"{layer.name}.bias"
        bias = arrays.get(bias_key)
        bias_codes = None if bias is None else Tensor4.from_real(np.reshape(bias, (1, 1, 1, -1))).codes.ravel()
        weights[layer.name] = ConvParams(kernel, bias_codes)
    return weights


__all__ = [
    "ACC_FRAC",
    "ACT_FMT",
    "Activation",
    "Add",
    "Conv",
    "ConvParams",
    "LayerSpec",
    "NetworkError",
    "NetworkSpec",
    "OpCount",
    "Pool",
    "ShapeError",
    "add_elementwise",
    "builtin_network",
    "conv2d_accumulate",
    "conv2d_reference",
    "count_operations",
    "float_to_weights",
    "load_network_json",
    "pool",
    "random_weights",
    "relu",
    "run_network",
]
