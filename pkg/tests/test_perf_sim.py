from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_tensor3, random_tensor4
from hapm_accel.config import AccelConfig, LayerGeometry
from hapm_accel.cycle_model import min_cycles
from hapm_accel.perf_sim import (CycleReport, LayerReport, SimConfig, compare_runs, simulate_layer,
                                 simulate_network, step_costs)
from hapm_accel.reference_nn import Conv, ConvParams, NetworkSpec
from hapm_accel.schedule import execute_schedule, schedule_conv
from hapm_accel.tensor_core import Tensor3, Tensor4


def ideal(accel, **kw):
    return SimConfig(replace(accel, fifo_depth_data=None, fifo_depth_out=None, **kw), writeback_ports=accel.n_cu)


def feasible_layer(rng):
    while True:
        n_cu = int(rng.choice([1, 2, 4]))
        geom = LayerGeometry(int(rng.integers(4, 20)), int(rng.integers(1, 7)), n_cu * int(rng.integers(1, 4)),
                             int(rng.choice([1, 2, 3])), int(rng.integers(1, 3)))
        accel = AccelConfig(n_cu=n_cu, cu_x=int(rng.integers(1, 4)), cu_y=int(rng.integers(2, 4)))
        if geom.n_i >= geom.k and min_cycles(geom, accel).feasible:
            return geom, accel


def layer_inputs(rng, geom, lo=-40, hi=40):
    return random_tensor4(rng, geom.k, geom.n_if, geom.n_of, lo, hi), random_tensor3(rng, geom.n_i, geom.n_i, geom.n_if)


@given(st.integers(0, 2**31 - 1))
def test_lower_bound_exact_when_ideal(seed):
    rng = np.random.default_rng(seed)
    geom, accel = feasible_layer(rng)
    kern, inp = layer_inputs(rng, geom)
    cfg = ideal(accel, dsb_enabled=False)
    rep = simulate_layer(schedule_conv(geom, accel), kern, inp, cfg)
    assert rep.cycles == min_cycles(geom, accel).min_cycles + cfg.fill
    assert rep.stall_fifo == rep.stall_writeback == 0


@given(st.integers(0, 2**31 - 1))
def test_min_cycles_is_lower_bound_with_finite_fifos(seed):
    rng = np.random.default_rng(seed)
    geom, accel = feasible_layer(rng)
    kern, inp = layer_inputs(rng, geom)
    cfg = SimConfig(replace(accel, dsb_enabled=False, fifo_depth_data=2, fifo_depth_out=accel.n_cu))
    rep = simulate_layer(schedule_conv(geom, accel), kern, inp, cfg)
    assert rep.cycles >= min_cycles(geom, accel).min_cycles
    assert min(rep.cycles, rep.steps, rep.skipped_lanes, rep.stall_fifo, rep.stall_writeback) >= 0


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
def test_fifo_depth_monotone(seed, d1, extra):
    rng = np.random.default_rng(seed)
    geom, accel = feasible_layer(rng)
    kern, inp = layer_inputs(rng, geom)
    # prune half of the kernels so step costs vary
    codes = kern.codes.copy()
    codes[:, :, ::2, :] = 0
    kern = Tensor4(codes)
    stream = schedule_conv(geom, accel)
    shallow = simulate_layer(stream, kern, inp, SimConfig(replace(accel, fifo_depth_data=d1), dispatch_cycles=2))
    deep = simulate_layer(stream, kern, inp, SimConfig(replace(accel, fifo_depth_data=d1 + extra), dispatch_cycles=2))
    unbounded = simulate_layer(stream, kern, inp, SimConfig(replace(accel, fifo_depth_data=None), dispatch_cycles=2))
    assert shallow.cycles >= deep.cycles >= unbounded.cycles


def test_all_zero_kernels_cost_check_per_step(rng):
    geom, accel = LayerGeometry(18, 4, 8, 3, 1), AccelConfig(n_cu=4)
    kern = Tensor4(np.zeros((3, 3, 4, 8), dtype=int))
    inp = random_tensor3(rng, 18, 18, 4)
    cfg = ideal(accel)
    rep = simulate_layer(schedule_conv(geom, accel), kern, inp, cfg)
    assert rep.cycles == rep.steps * cfg.dsb_check_cost + cfg.fill
    assert rep.skipped_lanes == rep.steps * accel.n_cu


def brute_force_cost(stream, kern, inp, check_cost):
    """Per-step cost from first principles: max over lanes of the lane cost."""
    total = 0
    x = np.pad(inp.codes, ((0, 0), (0, stream.geom.s), (0, 0)))
    k, s = stream.geom.k, stream.geom.s
    for step in stream:
        data_zero = bool(step.windows) and all(
            not np.any(x[w.i:w.i + k, w.j:w.j + k + s, step.g]) for w in step.windows)
        lane_costs = []
        for lane in step.lanes(stream.cfg.n_cu):
            kernel_zero = not np.any(kern.codes[:, :, step.g, lane])
            lane_costs.append(check_cost if (kernel_zero or data_zero) else 4)
        total += max(lane_costs)
    return total


def test_half_groups_pruned_closed_form(rng):
    geom, accel = LayerGeometry(18, 8, 8, 3, 1), AccelConfig(n_cu=4)
    kern, inp = layer_inputs(rng, geom)
    codes = kern.codes.copy()
    codes[:, :, 0::2, 0:4] = 0  # half of the (g, block) groups
    codes[:, :, 1::2, 4:8] = 0
    pruned = Tensor4(codes)
    stream = schedule_conv(geom, accel)
    cfg = ideal(accel)
    cost, _ = step_costs(stream, pruned, inp, cfg)
    assert cost.sum() == brute_force_cost(stream, pruned, inp, cfg.dsb_check_cost)
    dense = simulate_layer(stream, kern, inp, cfg).cycles - cfg.fill
    sparse = simulate_layer(stream, pruned, inp, cfg).cycles - cfg.fill
    assert sparse / dense == pytest.approx(0.625, abs=1e-9)


def test_data_zero_skip_matches_brute_force(rng):
    geom, accel = LayerGeometry(12, 2, 4, 3, 1), AccelConfig(n_cu=2)
    kern, _ = layer_inputs(rng, geom)
    codes = np.zeros((12, 12, 2), dtype=int)
    codes[:4, :4, 0] = 5  # mostly zero input
    inp = Tensor3(codes)
    stream = schedule_conv(geom, accel)
    cost, _ = step_costs(stream, kern, inp, ideal(accel))
    assert cost.sum() == brute_force_cost(stream, kern, inp, 1)
    assert cost.sum() < 4 * len(stream)


def test_one_dense_lane_gates_the_step(rng):
    geom, accel = LayerGeometry(10, 2, 4, 3, 1), AccelConfig(n_cu=4)
    kern, inp = layer_inputs(rng, geom)
    codes = kern.codes.copy()
    codes[:, :, :, 1:] = 0  # three of four lanes zero everywhere
    stream = schedule_conv(geom, accel)
    cfg = ideal(accel)
    assert simulate_layer(stream, Tensor4(codes), inp, cfg).cycles == simulate_layer(stream, kern, inp, cfg).cycles


def test_dsb_does_not_change_outputs(rng):
    geom, accel = LayerGeometry(10, 3, 4, 3, 1), AccelConfig(n_cu=2)
    kern, inp = layer_inputs(rng, geom)
    on = execute_schedule(inp, kern, None, geom, replace(accel, dsb_enabled=True))
    off = execute_schedule(inp, kern, None, geom, replace(accel, dsb_enabled=False))
    assert on == off


def test_writeback_contention_counts_stalls(rng):
    geom, accel = LayerGeometry(18, 1, 12, 3, 1), AccelConfig(n_cu=12, fifo_depth_out=12)
    kern, inp = layer_inputs(rng, geom)
    stream = schedule_conv(geom, accel)
    one_port = simulate_layer(stream, kern, inp, SimConfig(accel, writeback_ports=1))
    all_ports = simulate_layer(stream, kern, inp, SimConfig(accel, writeback_ports=12))
    assert one_port.stall_writeback > 0 and all_ports.stall_writeback == 0
    assert one_port.cycles > all_ports.cycles


def one_conv_net():
    layer = Conv("c", ("in",), 3, 1, 1, 2, 4)
    return NetworkSpec("one", "in", (8, 8, 2), [layer]), layer


def test_network_of_one_layer_equals_layer(rng):
    net, layer = one_conv_net()
    kern = random_tensor4(rng, 3, 2, 4, -40, 40)
    inp = random_tensor3(rng, 8, 8, 2)
    cfg = SimConfig(AccelConfig(n_cu=2))
    rep = simulate_network(net, {"c": ConvParams(kern)}, cfg, [inp])
    single = simulate_layer(schedule_conv(layer, cfg.accel, 10), kern, inp.padded(1), cfg, "c")
    assert rep.total_cycles == single.cycles
    fast = simulate_network(net, {"c": ConvParams(kern)}, cfg.with_accel(clock_mhz=200.0), [inp])
    assert fast.seconds * 2 == rep.seconds
    assert rep.mean_ms_per_image == pytest.approx(1e3 * rep.seconds)


def test_simulation_deterministic(rng):
    net, _ = one_conv_net()
    w = {"c": ConvParams(random_tensor4(rng, 3, 2, 4, -40, 40))}
    imgs = [random_tensor3(rng, 8, 8, 2) for _ in range(2)]
    cfg = SimConfig(AccelConfig(n_cu=2))
    a = simulate_network(net, w, cfg, imgs)
    b = simulate_network(net, w, cfg, imgs)
    assert [l.csv_fields() for l in a.layers] == [l.csv_fields() for l in b.layers]


def report(cycles):
    return CycleReport([LayerReport("x", cycles)], 1, 100.0, 1000)


def test_compare_runs():
    rows = compare_runs([("a", report(200)), ("b", report(200))])
    assert [r.speedup for r in rows] == [1.0, 1.0]
    rows = compare_runs([("slow", report(200)), ("fast", report(100)), ("mid", report(150))])
    assert [r.label for r in rows] == ["slow", "fast", "mid"]
    assert rows[1].speedup == 2.0
    with pytest.raises(ValueError):
        compare_runs([("a", report(1))])


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(writeback_ports=0)
    with pytest.raises(ValueError):
        SimConfig(dsb_check_cost=-1)
    assert SimConfig().fill == 5
