# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring
# pylint: disable=invalid-name,too-few-public-methods,protected-access
import dataclasses
import json
import os
import tempfile

import numpy as np
import pytest
import yaml
from openpyxl import load_workbook
from pandas import read_csv

from blkconv.blocking import load_blocking_plan
from blkconv.networks import init_params, save_network
from blkconv.planner import BufferAlloc, load_plan, plan_from_grouping, save_plan
from blkconv.simulator import simulate_fused, traffic_report_parse
from blkconv.subs import ExitCode, main, parse_tile
from blkconv.tensorio import read_tensor, write_tensor
from blkconv.tensors import ScalarFormat, Tensor4D
from .conftest import random_input, toy_net


@pytest.fixture(name="workdir")
def fixture_workdir():
    with tempfile.TemporaryDirectory() as temp_dir:
        yield temp_dir


@pytest.fixture(name="toy_path")
def fixture_toy_path(workdir):
    path = os.path.join(workdir, "toy.json")
    save_network(toy_net(), path)
    return path


def test_presets(capsys):
    assert main(["presets"]) == ExitCode.OK
    out = capsys.readouterr().out
    assert "vgg16-conv" in out
    assert "=== BUDGET #1: ultra96.yaml ===" in out
    assert "=== BUDGET #2: zc706.yaml ===" in out


def test_analyze(workdir):
    path = os.path.join(workdir, "volumes.csv")
    assert main(["analyze", "vdsr", "--out_path", path]) == ExitCode.OK
    frame = read_csv(path)
    assert len(frame) == 20
    assert frame["Mbit"].iloc[0] == 1012.5


def test_analyze_xlsx(workdir):
    path = os.path.join(workdir, "volumes.json")
    xlsx_path = os.path.join(workdir, "volumes.xlsx")
    assert main(["analyze", "vgg16-conv", "--unit", "MB", "--bits", "16", "--format", "json",
                 "--out_path", path, "--xlsx", xlsx_path]) == ExitCode.OK
    with open(path, "r", encoding="utf-8") as file:
        records = json.load(file)
    assert records[0]["layer"] == "conv1_1"
    assert records[0]["MB"] == 6.125
    assert os.path.getsize(xlsx_path) > 0


def test_analyze_input_hw(workdir):
    path = os.path.join(workdir, "volumes.csv")
    assert main(["analyze", "vdsr", "--input-hw", "64", "128", "--unit", "bit",
                 "--out_path", path]) == ExitCode.OK
    assert read_csv(path)["bit"].iloc[0] == 64 * 64 * 128 * 8


def test_blocking(workdir, capsys):
    path = os.path.join(workdir, "blocking.json")
    assert main(["blocking", "vgg16-conv", "F28", "--out_path", path]) == ExitCode.OK
    assert "Blocking ratio: 76.92%" in capsys.readouterr().out
    plan = load_blocking_plan(path)
    assert plan["conv1_1"].grid.shape == (8, 8)


def test_plan(workdir, toy_path):
    path = os.path.join(workdir, "plans.csv")
    best_path = os.path.join(workdir, "best.json")
    assert main(["plan", toy_path, "--budget", "zc706", "--tiles", "4", "8x4",
                 "--cut-at", "conv", "--out_path", path, "--best", best_path]) == ExitCode.OK
    frame = read_csv(path)
    assert len(frame) > 0
    assert frame["fits_onchip"].all()
    best = load_plan(best_path)
    assert [lid for group in best.groups for lid in group] == ["conv1", "conv2", "conv3"]


def test_plan_without_memory(workdir, toy_path):
    budget_path = os.path.join(workdir, "empty.yaml")
    with open(budget_path, "w", encoding="utf-8") as file:
        yaml.safe_dump({"name": "empty", "bram_bits": 0}, file)
    path = os.path.join(workdir, "plans.csv")
    assert main(["plan", toy_path, "--budget", budget_path, "--tiles", "4",
                 "--out_path", path]) == ExitCode.OK
    with open(path, "r", encoding="utf-8") as file:
        assert len(file.read().splitlines()) == 1


def test_simulate_fused(workdir, toy_path):
    net = toy_net()
    plan = plan_from_grouping(net, [3], 4)
    plan_path = os.path.join(workdir, "plan.json")
    save_plan(plan, plan_path)
    traffic_path = os.path.join(workdir, "traffic.csv")
    trace_path = os.path.join(workdir, "trace.jsonl")
    out_path = os.path.join(workdir, "out.bct")
    assert main(["simulate", toy_path, "--plan", plan_path, "--traffic", traffic_path,
                 "--trace", trace_path, "--out_path", out_path]) == ExitCode.OK
    expected = simulate_fused(net, random_input(net, np.random.default_rng(0)), plan,
                              params=init_params(net, 0))
    with open(traffic_path, "r", encoding="utf-8") as file:
        assert traffic_report_parse(file.read(), "csv") == expected.traffic
    assert read_tensor(out_path) == expected.output
    with open(trace_path, "r", encoding="utf-8") as file:
        assert len(file.read().splitlines()) == len(expected.trace)


def test_simulate_baseline_and_verify(workdir, toy_path, capsys):
    net = toy_net()
    input_path = os.path.join(workdir, "x.bct")
    write_tensor(random_input(net, np.random.default_rng(3)), input_path)
    out_path = os.path.join(workdir, "out.bct")
    reference_path = os.path.join(workdir, "reference.bct")
    assert main(["simulate", toy_path, "--mode", "baseline", "--tiles", "4", "4", "2", "2",
                 "--input", input_path, "--out_path", out_path,
                 "--reference", reference_path]) == ExitCode.OK
    capsys.readouterr()
    assert main(["verify", out_path, reference_path]) == ExitCode.OK
    assert "OK" in capsys.readouterr().out


def test_simulate_summary(workdir):
    traffic_path = os.path.join(workdir, "traffic.json")
    assert main(["simulate", "vdsr", "--mode", "baseline", "--tiles", "270", "480",
                 "--shapes-only", "--summary", "--format", "json",
                 "--traffic", traffic_path]) == ExitCode.OK
    with open(traffic_path, "r", encoding="utf-8") as file:
        records = {record["tensor_class"]: record for record in json.load(file)}
    assert records["input_image"]["mbits"] == 15.8203125
    assert records["fmap_total"]["mbits"] > 36000


def test_simulate_fused_stem(workdir):
    traffic_path = os.path.join(workdir, "traffic.json")
    assert main(["simulate", "vdsr", "--mode", "baseline", "--tiles", "270", "480",
                 "--fused-stem", "1", "--shapes-only", "--summary", "--format", "json",
                 "--traffic", traffic_path]) == ExitCode.OK
    with open(traffic_path, "r", encoding="utf-8") as file:
        records = {record["tensor_class"]: record for record in json.load(file)}
    assert records["fmap_total"]["mbits"] == 36481.640625
    assert main(["simulate", "vdsr", "--mode", "baseline", "--tiles", "270", "480",
                 "--fused-stem", "-1", "--shapes-only"]) == ExitCode.INPUT_ERROR


def test_simulate_xlsx_and_json_output(workdir, toy_path):
    net = toy_net()
    plan = plan_from_grouping(net, [3], 4)
    plan_path = os.path.join(workdir, "plan.json")
    save_plan(plan, plan_path)
    traffic_path = os.path.join(workdir, "traffic.xlsx")
    out_path = os.path.join(workdir, "out.json")
    assert main(["simulate", toy_path, "--plan", plan_path, "--traffic", traffic_path,
                 "--out_path", out_path]) == ExitCode.OK
    expected = simulate_fused(net, random_input(net, np.random.default_rng(0)), plan,
                              params=init_params(net, 0))
    rows = list(load_workbook(traffic_path)["Traffic"].iter_rows(values_only=True))
    assert rows[0][:2] == ("layer", "input_image")
    assert [row[0] for row in rows[1:]] == ["conv1", "conv2", "conv3", "total"]
    assert rows[-1][2] == expected.traffic.total("weights")
    with open(out_path, "r", encoding="utf-8") as file:
        assert json.load(file)["dims"] == list(expected.output.dims)
    assert read_tensor(out_path) == expected.output


def test_simulate_overflow(workdir, toy_path):
    net = toy_net()
    plan = plan_from_grouping(net, [3], 4)
    plan_path = os.path.join(workdir, "plan.json")
    save_plan(dataclasses.replace(plan, buffer_alloc=BufferAlloc(input_bits=8)), plan_path)
    assert main(["simulate", toy_path, "--plan", plan_path, "--shapes-only"]) \
        == ExitCode.INFEASIBLE


def test_verify_mismatch(workdir, capsys):
    fmt = ScalarFormat.parse("fixed8.4")
    data = np.arange(12).reshape(1, 1, 3, 4)
    changed = data.copy()
    changed[0, 0, 1, 2] = 0
    expected_path = os.path.join(workdir, "expected.bct")
    actual_path = os.path.join(workdir, "actual.bct")
    write_tensor(Tensor4D(data, fmt), expected_path)
    write_tensor(Tensor4D(changed, fmt), actual_path)
    assert main(["verify", actual_path, expected_path]) == ExitCode.MISMATCH
    assert "MISMATCH at [0, 0, 1, 2]: expected 6, got 0" in capsys.readouterr().out
    other_path = os.path.join(workdir, "other.bct")
    write_tensor(Tensor4D.zeros((1, 1, 3, 3), fmt), other_path)
    assert main(["verify", other_path, expected_path]) == ExitCode.MISMATCH


def test_input_errors(workdir, toy_path):
    assert main(["verify", os.path.join(workdir, "missing.bct"),
                 os.path.join(workdir, "missing.bct")]) == ExitCode.INPUT_ERROR
    assert main(["analyze", "alexnet"]) == ExitCode.INPUT_ERROR
    assert main(["simulate", toy_path, "--shapes-only"]) == ExitCode.INPUT_ERROR
    assert main(["simulate", toy_path, "--mode", "baseline"]) == ExitCode.INPUT_ERROR
    assert main(["plan", toy_path, "--budget", "7", "--tiles", "4"]) == ExitCode.INPUT_ERROR


@pytest.mark.parametrize("argv", [
    ["explain"],
    ["plan", "vdsr"],
    ["plan", "vdsr", "--tiles", "0"],
    ["simulate", "vdsr", "--mode", "baseline", "--tiles", "4", "4", "4"],
])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == ExitCode.INPUT_ERROR


def test_parse_tile():
    assert parse_tile("28") == (28, 28)
    assert parse_tile("28x56") == (28, 56)
