"""Command line entry point: ``hapm-accel <command> [flags]``.

Exit codes: 0 success, 1 verification failure or infeasible configuration,
2 usage error, 3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import model_io
from .config import AccelConfig, LayerGeometry
from .cycle_model import EXPLORE_HEADER, explore, min_cycles
from .hapm import SPARSITY_HEADER, enumerate_groups, run_hapm, sparsity_report, uniform_prune
from .perf_sim import COMPARE_HEADER, RunSummary, SimConfig, compare_runs, simulate_network
from .reference_nn import builtin_network, conv2d_reference, float_to_weights, load_network_json, random_weights, run_layer, run_network
from .schedule import ScheduleError, execute_schedule

log = logging.getLogger("hapm_accel")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

CYCLES_HEADER = ("layer", "n_i", "n_if", "n_of", "k", "s", "k_o", "p_x", "g_cu", "p_y", "ratio", "min_cycles", "feasible")

# schedule evaluator used by `verify`; tests swap it to check failure reporting
execute = execute_schedule


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    """``"2,4,6"`` or ``"2-16"`` (inclusive) or a mix of both."""
    out = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like '2,4' or '2-16', got {text!r}") from None
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers like '100,150', got {text!r}") from None


def _depth(text: str) -> int | None:
    if text.lower() in ("none", "inf", "unbounded"):
        return None
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("FIFO depth must be >= 1 or 'none'")
    return value


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _fraction(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError("sparsity must be in (0, 1]")
    return value


def _add_hw(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ncu", type=int, default=12, help="computation-unit matrices (default 12)")
    p.add_argument("--cux", type=int, default=2, help="PE columns per matrix (default 2)")
    p.add_argument("--cuy", type=int, default=3, help="PE rows per matrix (default 3)")
    p.add_argument("--clock", type=float, default=100.0, help="clock in MHz (default 100)")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", type=Path, help="model manifest (JSON)")
    p.add_argument("--network", default="cifar_resnet21",
                   help="built-in network name or network JSON, used with random weights when --model is absent")
    p.add_argument("--seed", type=int, default=0, help="seed for random weights and synthetic images")


def _add_images(p: argparse.ArgumentParser, default_count: int) -> None:
    p.add_argument("--images", type=Path, help="image file; synthetic images when absent")
    p.add_argument("--count", type=int, default=default_count, help=f"images to use (default {default_count})")
    p.add_argument("--start", type=int, default=0, help="first image index in --images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hapm-accel", description="Systolic CNN accelerator model and pruning tools.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="check the dispatch schedule against the reference convolution")
    _add_model(p)
    _add_images(p, 1)
    _add_hw(p)

    p = sub.add_parser("cycles", help="analytical minimum cycles per conv layer")
    p.add_argument("--layer", action="append", default=[], metavar="N_I,N_IF,N_OF,K,S",
                   help="explicit layer (padded input size); repeatable; overrides --model/--network")
    _add_model(p)
    _add_hw(p)
    p.add_argument("--pad-channels", action="store_true", help="round n_of up to a multiple of n_cu")

    p = sub.add_parser("explore", help="design-space sweep of theoretical GOPs")
    _add_model(p)
    p.add_argument("--ncu", type=_int_list, default=_int_list("2-16"))
    p.add_argument("--cux", type=_int_list, default=_int_list("2,4,6,8,10"))
    p.add_argument("--cuy", type=_int_list, default=[3])
    p.add_argument("--clock", type=_float_list, default=[100.0])
    p.add_argument("-o", "--output", type=Path, help="CSV path (default standard output)")

    p = sub.add_parser("simulate", help="cycle simulation of the network over images")
    _add_model(p)
    _add_images(p, 10)
    _add_hw(p)
    p.add_argument("--dsb", type=_on_off, default=True, metavar="on|off", help="dynamic sparsity bypass (default on)")
    p.add_argument("--fifo-depth", type=_depth, default=8, help="data FIFO depth in steps, or 'none' (default 8)")
    p.add_argument("--fifo-depth-out", type=_depth, default=32, help="output FIFO depth in elements (default 32)")
    p.add_argument("--writeback-ports", type=int, default=1, help="output writes per cycle (default 1)")
    p.add_argument("-o", "--output", type=Path, help="report CSV path (default standard output)")

    p = sub.add_parser("prune", help="group (hapm) or uniform magnitude pruning")
    _add_model(p)
    p.add_argument("--ncu", type=int, default=12, help="group width; must match the hardware (default 12)")
    p.add_argument("--method", choices=("hapm", "uniform"), default="hapm")
    p.add_argument("--sparsity", type=_fraction, required=True, help="target fraction (groups for hapm, weights for uniform)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--out", type=Path, required=True, help="output manifest path")
    p.add_argument("--report", type=Path, help="per-layer sparsity CSV")

    p = sub.add_parser("quantize", help="quantize float weights into a model manifest")
    p.add_argument("--network", default="cifar_resnet21")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--float-weights", type=Path, help="npz with '<layer>.kernel' and '<layer>.bias' arrays")
    src.add_argument("--random", action="store_true", help="random dense weights from --seed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output manifest path")

    p = sub.add_parser("report", help="compare simulate reports; the first is the baseline")
    p.add_argument("runs", nargs="+", type=Path, help="report CSVs written by simulate")
    p.add_argument("--labels", help="comma-separated run labels (default file stems)")
    p.add_argument("-o", "--output", type=Path, help="CSV path (default standard output)")
    return parser


def _network(name: str):
    if name.endswith(".json"):
        return load_network_json(name)
    return builtin_network(name)


def _model(args):
    if args.model is not None:
        net, weights, _ = model_io.load_model(args.model)
        return net, weights
    net = _network(args.network)
    return net, random_weights(net, seed=args.seed)


def _accel(args, **extra) -> AccelConfig:
    return AccelConfig(n_cu=args.ncu, cu_x=args.cux, cu_y=args.cuy, clock_mhz=args.clock, **extra)


def _images(args, net):
    if args.count < 0 or args.start < 0:
        raise UsageError("--count and --start must be >= 0")
    if args.images is not None:
        imgs, _ = model_io.load_images(args.images, args.start, args.start + args.count)
    else:
        imgs = model_io.random_images(args.count, args.seed, net.input_shape)
    for img in imgs:
        if img.shape != net.input_shape:
            raise UsageError(f"image shape {img.shape} does not match network input {net.input_shape}")
    return imgs


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def cmd_verify(args) -> int:
    net, weights = _model(args)
    cfg = _accel(args)
    imgs = _images(args, net)
    mismatch = []

    def checked_layer(layer, inputs, w):
        ref = run_layer(layer, inputs, w)
        if layer.kind == "conv" and not mismatch:
            padded = inputs[0].padded(layer.padding)
            params = w[layer.name]
            got = execute(padded, params.kernel, params.bias, layer, cfg)
            diff = np.argwhere(got.codes != ref.codes)
            if diff.size:
                x, y, c = diff[0]
                mismatch.append((layer.name, int(x), int(y), int(c), int(got.codes[x, y, c]), int(ref.codes[x, y, c])))
        return ref

    for n, img in enumerate(imgs):
        run_network(net, weights, img, layer_fn=checked_layer)
        if mismatch:
            name, x, y, c, got, ref = mismatch[0]
            print(f"MISMATCH image {n} layer {name} at (x={x}, y={y}, c={c}): schedule {got} reference {ref}")
            return EXIT_FAIL
    print(f"OK {len(imgs)} images, {len(net.conv_layers())} conv layers bit-identical")
    return EXIT_OK


def cmd_cycles(args) -> int:
    cfg = _accel(args)
    rows = []
    if args.layer:
        for n, text in enumerate(args.layer):
            try:
                vals = [int(v) for v in text.split(",")]
                geom = LayerGeometry(*vals)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"--layer {text!r}: expected N_I,N_IF,N_OF,K[,S] ({exc})") from None
            rows.append((f"layer{n}", geom))
    else:
        from .config import conv_geometries

        net, _ = _model(args) if args.model else (_network(args.network), None)
        rows = [(layer.name, geom) for layer, geom in conv_geometries(net)]
    out = []
    total = 0
    feasible = True
    for name, geom in rows:
        est = min_cycles(geom, cfg, args.pad_channels)
        for note in est.warnings:
            log.warning("%s: %s", name, note)
        feasible &= est.feasible
        total += est.min_cycles or 0
        out.append((name, geom.n_i, geom.n_if, geom.n_of, geom.k, geom.s, est.k_o, est.p_x, est.g_cu,
                    "" if est.p_y is None else est.p_y, "" if est.ratio is None else est.ratio,
                    "" if est.min_cycles is None else est.min_cycles, est.feasible))
    text = model_io.csv_text(CYCLES_HEADER, out)
    text += f"\ntotal_cycles,{total}\nseconds,{model_io._render(total / (cfg.clock_mhz * 1e6))}\n"
    sys.stdout.write(text)
    if not feasible:
        log.error("configuration infeasible for at least one layer")
        return EXIT_FAIL
    return EXIT_OK


def cmd_explore(args) -> int:
    net = _model(args)[0] if args.model else _network(args.network)
    rows = explore(net, args.ncu, args.cux, args.cuy, args.clock)
    _emit(model_io.csv_text(EXPLORE_HEADER, [r.csv_fields() for r in rows]), args.output)
    return EXIT_OK


def cmd_simulate(args) -> int:
    net, weights = _model(args)
    if args.writeback_ports < 1:
        raise UsageError("--writeback-ports must be >= 1")
    accel = _accel(args, fifo_depth_data=args.fifo_depth, fifo_depth_out=args.fifo_depth_out, dsb_enabled=args.dsb)
    imgs = _images(args, net)
    if not imgs:
        raise UsageError("simulate needs at least one image")
    try:
        report = simulate_network(net, weights, SimConfig(accel, writeback_ports=args.writeback_ports), imgs)
    except ScheduleError as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    _emit(model_io.cycle_report_text(report), args.output)
    log.info("%d images: %.4f ms/image, %.3f GOPs", len(imgs), report.mean_ms_per_image, report.gops)
    return EXIT_OK


def cmd_prune(args) -> int:
    net, weights = _model(args)
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    try:
        groups = enumerate_groups(net, args.ncu)
    except ScheduleError as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    if args.method == "hapm":
        result = run_hapm(weights, net, args.ncu, args.sparsity, args.epochs)
    else:
        result = uniform_prune(weights, args.sparsity, args.epochs)
    model_io.save_model(args.out, net, result.weights, result.masks)
    rows = sparsity_report(result.weights, groups)
    if args.report is not None:
        model_io.save_report(args.report, SPARSITY_HEADER, [r.csv_fields() for r in rows])
    zero = sum(1 for g in groups if not np.any(g.view(result.weights[g.layer].kernel.codes)))
    log.info("%s: %d/%d groups all-zero", args.method, zero, len(groups))
    return EXIT_OK


def cmd_quantize(args) -> int:
    net = _network(args.network)
    if args.random:
        weights = random_weights(net, seed=args.seed)
    else:
        with np.load(args.float_weights) as data:
            weights = float_to_weights(net, dict(data))
    model_io.save_model(args.out, net, weights)
    return EXIT_OK


def cmd_report(args) -> int:
    labels = args.labels.split(",") if args.labels else [p.stem for p in args.runs]
    if len(labels) != len(args.runs):
        raise UsageError("--labels count differs from the number of runs")
    if len(args.runs) < 2:
        raise UsageError("report needs at least two runs")
    runs = []
    for label, path in zip(labels, args.runs):
        _, summary = model_io.read_cycle_report(path)
        runs.append((label, RunSummary(int(summary["total_cycles"]), float(summary["seconds"]),
                                       float(summary["mean_ms_per_image"]), float(summary["gops"]))))
    rows = compare_runs(runs)
    # one column per run
    table = [(metric, *[getattr(r, metric) for r in rows]) for metric in COMPARE_HEADER[1:]]
    _emit(model_io.csv_text(("metric", *labels), table), args.output)
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "cycles": cmd_cycles, "explore": cmd_explore, "simulate": cmd_simulate,
            "prune": cmd_prune, "quantize": cmd_quantize, "report": cmd_report}


def _resolved(args) -> str:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    return json.dumps(cfg, sort_keys=True, default=str)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    print(f"config {_resolved(args)}", file=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, model_io.ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
