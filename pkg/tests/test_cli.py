import numpy as np
import pytest

from hapm_accel import cli
from hapm_accel.tensor_core import Tensor3


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_worked_example_prints_12288(capsys):
    code, out, err = run(capsys, "cycles", "--layer", "34,12,12,3,1", "--ncu", 12, "--cux", 2, "--cuy", 3)
    assert code == 0
    assert "12288" in out.splitlines()[1]
    assert err.startswith("config ")


def test_two_identical_layers_double(capsys):
    _, one, _ = run(capsys, "cycles", "--layer", "34,12,12,3,1")
    _, two, _ = run(capsys, "cycles", "--layer", "34,12,12,3,1", "--layer", "34,12,12,3,1")
    assert "total_cycles,12288" in one and "total_cycles,24576" in two


def test_infeasible_flagged(capsys):
    code, out, _ = run(capsys, "cycles", "--layer", "34,1,12,5,1", "--cux", 1, "--cuy", 1)
    assert code == 1 and out.splitlines()[1].endswith(",0")


def test_usage_and_io_errors(capsys, tmp_path):
    assert run(capsys, "cycles", "--bogus")[0] == 2
    assert run(capsys, "cycles", "--layer", "1,2")[0] == 2
    assert run(capsys, "simulate", "--dsb", "maybe")[0] == 2
    assert run(capsys, "simulate", "--model", tmp_path / "missing.json")[0] == 3


@pytest.fixture
def models(tmp_path, capsys):
    dense = tmp_path / "dense.json"
    assert run(capsys, "quantize", "--random", "--seed", 3, "--out", dense)[0] == 0
    pruned = tmp_path / "hapm.json"
    assert run(capsys, "prune", "--model", dense, "--method", "hapm", "--sparsity", 0.5, "--epochs", 2,
               "--out", pruned, "--report", tmp_path / "sp.csv")[0] == 0
    return dense, pruned


def test_verify(capsys, models, monkeypatch):
    dense, _ = models
    code, out, _ = run(capsys, "verify", "--model", dense, "--count", 1)
    assert code == 0 and out.startswith("OK 1 images")
    code, out, _ = run(capsys, "verify", "--model", dense, "--count", 0)
    assert code == 0 and "0 images" in out

    def corrupted(inp, kernels, bias, layer, cfg):
        out = cli.execute_schedule(inp, kernels, bias, layer, cfg)
        codes = out.codes.copy()
        codes[0, 0, 0] = codes[0, 0, 0] ^ 1
        return Tensor3(codes, out.fmt)

    monkeypatch.setattr(cli, "execute", corrupted)
    code, out, _ = run(capsys, "verify", "--model", dense, "--count", 1)
    assert code == 1 and "x=0, y=0, c=0" in out


def test_simulate_prune_report_chain(capsys, models, tmp_path):
    dense, pruned = models
    paths = {}
    for name, model, dsb in [("dense", dense, "off"), ("dense2", dense, "off"), ("off", pruned, "off"), ("on", pruned, "on")]:
        paths[name] = tmp_path / f"{name}.csv"
        assert run(capsys, "simulate", "--model", model, "--count", 1, "--dsb", dsb, "-o", paths[name])[0] == 0
    assert paths["dense"].read_bytes() == paths["dense2"].read_bytes()
    total = {k: int(p.read_text().splitlines()[-1].split(",")[0]) for k, p in paths.items()}
    assert total["on"] < total["off"]
    code, out, _ = run(capsys, "report", paths["dense"], paths["off"], paths["on"])
    lines = out.splitlines()
    assert code == 0 and lines[0] == "metric,dense,off,on"
    assert lines[-1].startswith("speedup,1.0,1.0,")


def test_explore_csv(capsys, tmp_path):
    out = tmp_path / "e.csv"
    assert run(capsys, "explore", "--ncu", "2-4", "--cux", "2,4", "-o", out)[0] == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "n_cu,cu_x,cu_y,dsps,clock_mhz,total_cycles,gops" and len(lines) == 7


def test_quantize_float_weights(capsys, tmp_path):
    from hapm_accel.reference_nn import builtin_network

    net = builtin_network()
    arrays = {}
    for layer in net.conv_layers():
        arrays[f"{layer.name}.kernel"] = np.full((layer.kernel, layer.kernel, layer.in_channels, layer.out_channels), 0.5)
        arrays[f"{layer.name}.bias"] = np.zeros(layer.out_channels)
    np.savez(tmp_path / "f.npz", **arrays)
    assert run(capsys, "quantize", "--float-weights", tmp_path / "f.npz", "--out", tmp_path / "q.json")[0] == 0
    assert run(capsys, "quantize", "--out", tmp_path / "q.json")[0] == 2
