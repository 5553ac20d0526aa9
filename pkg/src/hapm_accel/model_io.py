"""On-disk formats: model manifest + weight/mask blobs, image records, CSV reports.

Manifest (JSON)::

    {"format_version": 1,
     "network": {...NetworkSpec.to_dict()...},
     "quantization": {"weight_fmt": "Q2.5", "act_fmt": "Q3.4"},
     "weight_blob": "model.weights.bin",
     "mask_blob": "model.mask.bin"}          # optional

Weight blob: for each conv layer in network order, the kernel codes as signed
8-bit values in ``(k_x, k_y, in, out)`` C order, followed by ``out`` bias codes
when the layer has a bias. Mask blob: one byte (0 or 1) per kernel weight, same
order, no biases.

Image file: a 20-byte little-endian header ``<4sHHHHIBBBx`` = magic ``QIMG``,
version, width (x), height (y), channels, count, total_bits, frac_bits,
has_labels; then ``count`` images of ``width*height*channels`` signed codes in
Tensor3 order; then ``count`` label bytes if ``has_labels``.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .reference_nn import ConvParams, NetworkSpec, Weights
from .tensor_core import ACT_FMT, WEIGHT_FMT, FixedPointFormat, Tensor3, Tensor4, quantize_codes

FORMAT_VERSION = 1
IMAGE_MAGIC = b"QIMG"
IMAGE_VERSION = 1
_IMAGE_HEADER = struct.Struct("<4sHHHHIBBBx")


class ModelFormatError(ValueError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class LengthMismatchError(ModelFormatError):
    pass


class ShapeMismatchError(ModelFormatError):
    pass


def _blob_layout(net: NetworkSpec, with_bias: bool = True) -> list[tuple[str, int, int]]:
    """(layer, kernel_count, bias_count) per conv layer, in blob order."""
    layout = []
    for layer in net.conv_layers():
        n_w = layer.kernel * layer.kernel * layer.in_channels * layer.out_channels
        n_b = layer.out_channels if (with_bias and layer.has_bias) else 0
        layout.append((layer.name, n_w, n_b))
    return layout


def weights_to_bytes(net: NetworkSpec, weights: Weights) -> bytes:
    parts = []
    for layer in net.conv_layers():
        params = weights[layer.name]
        shape = (layer.kernel, layer.kernel, layer.in_channels, layer.out_channels)
        if params.kernel.shape != shape:
            raise ShapeMismatchError(f"{layer.name}: kernel {params.kernel.shape} != {shape}")
        parts.append(params.kernel.codes.astype("<i1").tobytes())
        if layer.has_bias:
            parts.append(params.bias.astype("<i1").tobytes())
        elif np.any(params.bias):
            raise ShapeMismatchError(f"{layer.name}: bias given for a layer without bias")
    return b"".join(parts)


def weights_from_bytes(net: NetworkSpec, blob: bytes, weight_fmt: FixedPointFormat = WEIGHT_FMT,
                       source: str = "<blob>") -> Weights:
    expected = sum(n_w + n_b for _, n_w, n_b in _blob_layout(net))
    offset = 0
    weights = {}
    for layer in net.conv_layers():
        n_w = layer.kernel * layer.kernel * layer.in_channels * layer.out_channels
        n_b = layer.out_channels if layer.has_bias else 0
        if offset + n_w + n_b > len(blob):
            raise LengthMismatchError(
                f"{source}: layer {layer.name!r} needs bytes [{offset}, {offset + n_w + n_b}) "
                f"but blob has {len(blob)} (expected {expected})")
        kernel = np.frombuffer(blob, dtype="<i1", count=n_w, offset=offset)
        kernel = kernel.reshape(layer.kernel, layer.kernel, layer.in_channels, layer.out_channels)
        offset += n_w
        bias = np.frombuffer(blob, dtype="<i1", count=n_b, offset=offset) if n_b else None
        offset += n_b
        weights[layer.name] = ConvParams(Tensor4(kernel, weight_fmt), bias)
    if offset != len(blob):
        raise LengthMismatchError(f"{source}: {len(blob) - offset} trailing bytes after offset {offset} (expected {expected})")
    return weights


def masks_to_bytes(net: NetworkSpec, masks: dict[str, np.ndarray]) -> bytes:
    parts = []
    for layer in net.conv_layers():
        shape = (layer.kernel, layer.kernel, layer.in_channels, layer.out_channels)
        mask = masks[layer.name]
        if mask.shape != shape:
            raise ShapeMismatchError(f"{layer.name}: mask {mask.shape} != {shape}")
        parts.append(np.asarray(mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def masks_from_bytes(net: NetworkSpec, blob: bytes, source: str = "<mask>") -> dict[str, np.ndarray]:
    offset = 0
    masks = {}
    for name, n_w, _ in _blob_layout(net, with_bias=False):
        if offset + n_w > len(blob):
            raise LengthMismatchError(f"{source}: layer {name!r} needs bytes [{offset}, {offset + n_w}) but mask has {len(blob)}")
        raw = np.frombuffer(blob, dtype=np.uint8, count=n_w, offset=offset)
        if np.any(raw > 1):
            raise ModelFormatError(f"{source}: layer {name!r} mask bytes must be 0 or 1 (offset {offset})")
        layer = net.layer(name)
        masks[name] = raw.astype(bool).reshape(layer.kernel, layer.kernel, layer.in_channels, layer.out_channels)
        offset += n_w
    if offset != len(blob):
        raise LengthMismatchError(f"{source}: {len(blob) - offset} trailing bytes after offset {offset}")
    return masks


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def save_model(manifest_path, net: NetworkSpec, weights: Weights, masks: dict[str, np.ndarray] | None = None) -> Path:
    """Write manifest plus blobs next to it; returns the manifest path."""
    manifest_path = Path(manifest_path)
    stem = manifest_path.name[:-5] if manifest_path.name.endswith(".json") else manifest_path.name
    weight_name = f"{stem}.weights.bin"
    _write_bytes(manifest_path.with_name(weight_name), weights_to_bytes(net, weights))
    manifest = {
        "format_version": FORMAT_VERSION,
        "network": net.to_dict(),
        "quantization": {"weight_fmt": WEIGHT_FMT.name, "act_fmt": ACT_FMT.name},
        "weight_blob": weight_name,
    }
    if masks is not None:
        mask_name = f"{stem}.mask.bin"
        _write_bytes(manifest_path.with_name(mask_name), masks_to_bytes(net, masks))
        manifest["mask_blob"] = mask_name
    _write_bytes(manifest_path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return manifest_path


def load_model(manifest_path):
    """Returns ``(net, weights, masks_or_None)``; masks are already applied to the weights."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{manifest_path}: invalid JSON at offset {exc.pos}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{manifest_path}: format_version {version!r}, supported {FORMAT_VERSION}")
    try:
        net = NetworkSpec.from_dict(manifest["network"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeMismatchError(f"{manifest_path}: bad network description: {exc}") from exc
    quant = manifest.get("quantization", {})
    weight_fmt = FixedPointFormat.parse(quant.get("weight_fmt", WEIGHT_FMT.name))
    act_fmt = FixedPointFormat.parse(quant.get("act_fmt", ACT_FMT.name))
    if (weight_fmt, act_fmt) != (WEIGHT_FMT, ACT_FMT):
        raise ModelFormatError(f"{manifest_path}: only {WEIGHT_FMT.name}/{ACT_FMT.name} supported")
    blob_path = manifest_path.with_name(manifest["weight_blob"])
    weights = weights_from_bytes(net, blob_path.read_bytes(), weight_fmt, str(blob_path))
    masks = None
    if manifest.get("mask_blob"):
        mask_path = manifest_path.with_name(manifest["mask_blob"])
        masks = masks_from_bytes(net, mask_path.read_bytes(), str(mask_path))
        weights = {name: p.with_kernel_codes(np.where(masks[name], p.kernel.codes, 0)) for name, p in weights.items()}
    return net, weights, masks


# --- images -----------------------------------------------------------------


def save_images(path, images: list[Tensor3], labels=None) -> None:
    if not images:
        raise ValueError("no images to save")
    shape, fmt = images[0].shape, images[0].fmt
    for img in images:
        if img.shape != shape or img.fmt != fmt:
            raise ShapeMismatchError("all images must share shape and format")
    if labels is not None and len(labels) != len(images):
        raise ShapeMismatchError("labels length differs from image count")
    header = _IMAGE_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, shape[0], shape[1], shape[2], len(images),
                                fmt.total_bits, fmt.frac_bits, labels is not None)
    body = b"".join(img.codes.astype("<i1").tobytes() for img in images)
    tail = b"" if labels is None else np.asarray(labels, dtype=np.uint8).tobytes()
    _write_bytes(Path(path), header + body + tail)


def read_image_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_IMAGE_HEADER.size)
    if len(raw) != _IMAGE_HEADER.size:
        raise ModelFormatError(f"{path}: file shorter than the {_IMAGE_HEADER.size}-byte header")
    magic, version, w, h, c, count, total, frac, has_labels = _IMAGE_HEADER.unpack(raw)
    if magic != IMAGE_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != IMAGE_VERSION:
        raise VersionMismatchError(f"{path}: image format version {version}, supported {IMAGE_VERSION}")
    if total != 8 or not 1 <= frac < total:
        raise ModelFormatError(f"{path}: unsupported format {total} bits / {frac} fractional")
    expected = _IMAGE_HEADER.size + count * w * h * c + (count if has_labels else 0)
    size = os.path.getsize(path)
    if size != expected:
        raise LengthMismatchError(f"{path}: {size} bytes, header implies {expected}")
    return {"width": w, "height": h, "channels": c, "count": count,
            "fmt": FixedPointFormat(total, frac), "has_labels": bool(has_labels)}


def load_images(path, start: int = 0, stop: int | None = None):
    """Images ``[start, stop)`` as Tensor3 plus their labels (or None)."""
    hdr = read_image_header(path)
    count = hdr["count"]
    stop = count if stop is None else stop
    if not 0 <= start <= stop <= count:
        raise IndexError(f"range [{start}, {stop}) outside the {count} images of {path}")
    per = hdr["width"] * hdr["height"] * hdr["channels"]
    shape = (hdr["width"], hdr["height"], hdr["channels"])
    with open(path, "rb") as fh:
        fh.seek(_IMAGE_HEADER.size + start * per)
        body = fh.read((stop - start) * per)
        labels = None
        if hdr["has_labels"]:
            fh.seek(_IMAGE_HEADER.size + count * per + start)
            labels = np.frombuffer(fh.read(stop - start), dtype=np.uint8).copy()
    codes = np.frombuffer(body, dtype="<i1").reshape(stop - start, *shape)
    return [Tensor3(c, hdr["fmt"]) for c in codes], labels


def cifar10_to_tensors(record_bytes: bytes) -> tuple[list[Tensor3], np.ndarray]:
    """Convert the public CIFAR-10 binary batch layout to activation-format tensors.

    Each record is one label byte then 1024 R, 1024 G, 1024 B bytes (row-major
    32x32 planes); x is the row index. Pixels map to ``v / 32`` quantized to Q3.4.
    """
    rec = 1 + 3 * 32 * 32
    if len(record_bytes) % rec:
        raise LengthMismatchError(f"CIFAR-10 data length {len(record_bytes)} not a multiple of {rec}")
    raw = np.frombuffer(record_bytes, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, 0].copy()
    pixels = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return [Tensor3(quantize_codes(p / 32.0, ACT_FMT), ACT_FMT) for p in pixels], labels


def random_images(count: int, seed: int = 0, shape=(32, 32, 3)) -> list[Tensor3]:
    """Synthetic CIFAR-shaped images: uniform pixel bytes through the ``v / 32`` recipe."""
    rng = np.random.default_rng(seed)
    return [Tensor3(quantize_codes(rng.integers(0, 256, shape) / 32.0, ACT_FMT)) for _ in range(count)]


# --- CSV --------------------------------------------------------------------


def _render(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_render(v) for v in row])
    return buf.getvalue()


def save_report(path, header, rows) -> None:
    """CSV with ``.`` decimals and no grouping, independent of locale."""
    _write_bytes(Path(path), csv_text(header, rows).encode())


def cycle_report_text(report) -> str:
    """Per-layer table, a blank line, then the one-row summary block."""
    from .perf_sim import REPORT_HEADER, SUMMARY_HEADER

    return (csv_text(REPORT_HEADER, [l.csv_fields() for l in report.layers]) + "\n"
            + csv_text(SUMMARY_HEADER, [report.summary_fields()]))


def save_cycle_report(path, report) -> None:
    _write_bytes(Path(path), cycle_report_text(report).encode())


def read_cycle_report(path) -> tuple[list[dict], dict]:
    """Parse a file written by :func:`save_cycle_report`."""
    text = Path(path).read_text()
    try:
        table, summary = text.split("\n\n", 1)
    except ValueError:
        raise ModelFormatError(f"{path}: missing summary block") from None
    layers = list(csv.DictReader(io.StringIO(table)))
    summ = list(csv.DictReader(io.StringIO(summary)))
    if len(summ) != 1:
        raise ModelFormatError(f"{path}: summary block must have one row")
    return layers, summ[0]
