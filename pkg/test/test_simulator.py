# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring
# pylint: disable=invalid-name,too-few-public-methods,protected-access
import json
import os
import tempfile

import numpy as np
import pytest

from blkconv.blocking import blocked_forward
from blkconv.networks import LayerDesc, NetworkDesc, init_params, reference_forward
from blkconv.planner import PlanMismatchError, blocking_from_plan, plan_from_grouping
from blkconv.presets import preset, vdsr
from blkconv.simulator import (
    MBIT, BufferOverflowError, EventKind, Tiling, TrafficReport, simulate_baseline,
    simulate_fused, traffic_frame, traffic_report_parse, traffic_report_render,
    _source_index, verify_equivalence
)
from blkconv.tensors import PadMode, ScalarFormat, Tensor4D, pad
from .conftest import random_input, random_net, toy_net


FIXED8 = ScalarFormat.parse("fixed8.4")
WEIGHTS = ScalarFormat.parse("fixed8.6")


def residual_block_net() -> NetworkDesc:
    return NetworkDesc("resblock", (2, 8, 8), FIXED8, WEIGHTS, (
        LayerDesc.conv("conv1", 2, 4),
        LayerDesc.conv("conv2", 4, 4),
        LayerDesc.conv("conv3", 4, 4, relu=False),
        LayerDesc.eltwise_add("sum", "conv1", relu=True),
        LayerDesc.conv("conv4", 4, 2),
    ))


def pooled_net() -> NetworkDesc:
    return NetworkDesc("pooled", (2, 16, 16), FIXED8, WEIGHTS, (
        LayerDesc.conv("conv1", 2, 4),
        LayerDesc.maxpool("pool1"),
        LayerDesc.conv("conv2", 4, 4),
        LayerDesc.maxpool("pool2"),
        LayerDesc.conv("conv3", 4, 2),
    ))


def strided_net() -> NetworkDesc:
    return NetworkDesc("strided", (3, 15, 13), FIXED8, WEIGHTS, (
        LayerDesc.conv("conv1", 3, 4, stride=2),
        LayerDesc.conv("conv2", 4, 4, relu=False),
        LayerDesc.eltwise_add("sum", "conv1"),
        LayerDesc.conv("conv3", 4, 4, k=1),
    ))


def random_groups(net: NetworkDesc, rng: np.random.Generator) -> list[list[str]]:
    ids = [layer.id for layer in net.compute_layers]
    cuts = sorted(int(c) for c in rng.choice(np.arange(1, len(ids)),
                                             size=int(rng.integers(0, len(ids))), replace=False))
    return [ids[a:b] for a, b in zip([0, *cuts], [*cuts, len(ids)])]


class TestBaseline:
    def test_vdsr_traffic(self):
        result = simulate_baseline(vdsr(), None, Tiling(270, 480), fused_stem=1,
                                   record_trace=False)
        summary = result.traffic.summary()
        assert result.output is None
        assert summary["input_image"] / MBIT == 15.8203125
        assert summary["output"] / MBIT == 15.8203125
        assert summary["intermediate_fmap"] / MBIT == 36 * 1012.5
        assert summary["fmap_total"] / MBIT == 36481.640625
        assert result.trace.events == []
        assert len(result.trace) > 0

    def test_toy_counts(self):
        net = toy_net()
        result = simulate_baseline(net, random_input(net, np.random.default_rng(0)),
                                   Tiling(4, 4))
        trace = result.trace
        assert trace.count(EventKind.LOAD) == 24
        assert trace.count(EventKind.COMPUTE) == 12
        assert trace.count(EventKind.STORE) == 12
        assert len(trace) == 48
        assert trace.undefined_sources() == []
        assert result.peaks["input"] == 2 * 4 * 5 * 5 * 8

    def test_toy_halo_and_reread(self):
        net = toy_net()
        traffic = simulate_baseline(net, None, Tiling(4, 4, tm=2)).traffic
        assert traffic.layers["conv1"].halo == 576
        assert traffic.layers["conv2"].halo == 1152
        assert traffic.total("halo") == 2880
        assert traffic.layers["conv1"].reread == 1600
        assert traffic.layers["conv2"].reread == 3200
        assert traffic.layers["conv3"].reread == 0
        assert traffic.layers["conv1"].input_image == 2 * 64 * 8
        assert traffic.layers["conv3"].output == 2 * 64 * 8
        without_halo = simulate_baseline(net, None, Tiling(4, 4, tm=2), halo=False).traffic
        assert without_halo.total("halo") == 0
        assert without_halo.fmap_bits == traffic.fmap_bits

    def test_shapes_only_traffic_matches(self):
        net = residual_block_net()
        x = random_input(net, np.random.default_rng(4))
        computed = simulate_baseline(net, x, Tiling(3, 5, tm=3, tn=2))
        shapes_only = simulate_baseline(net, None, Tiling(3, 5, tm=3, tn=2))
        assert computed.traffic == shapes_only.traffic
        assert len(computed.trace) == len(shapes_only.trace)

    @pytest.mark.parametrize("tiling", [Tiling(8, 8), Tiling(3, 5), Tiling(4, 4, tm=3, tn=1)])
    def test_equals_reference(self, tiling):
        for net in (toy_net(), residual_block_net(), pooled_net(), strided_net()):
            params = init_params(net, seed=2)
            x = random_input(net, np.random.default_rng(5))
            result = simulate_baseline(net, x, tiling, params=params)
            assert result.output == reference_forward(net, params, x), net.name
            assert result.trace.undefined_sources() == []

    def test_random_networks(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            net = random_net(rng)
            params = init_params(net, seed)
            x = random_input(net, rng)
            tiling = Tiling(int(rng.integers(3, 9)), int(rng.integers(3, 9)),
                            int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            result = simulate_baseline(net, x, tiling, params=params,
                                       fuse_epilogue=bool(rng.random() < 0.5))
            assert result.output == reference_forward(net, params, x), seed

    def test_fused_stem(self):
        net = toy_net()
        params = init_params(net)
        x = random_input(net, np.random.default_rng(6))
        result = simulate_baseline(net, x, Tiling(8, 8), params=params, fused_stem=2)
        assert result.output == reference_forward(net, params, x)
        assert result.traffic.intermediate_fmap == 0
        assert result.traffic.total("halo") == 0
        assert result.traffic.fmap_bits == 2 * 64 * 8 + 2 * 64 * 8
        assert result.trace.undefined_sources() == []
        tiled = simulate_baseline(net, x, Tiling(4, 4), params=params, fused_stem=2)
        assert tiled.output == result.output
        assert tiled.traffic.total("halo") > 0

    def test_epilogue_keeps_output(self):
        net = pooled_net()
        params = init_params(net)
        x = random_input(net, np.random.default_rng(7))
        folded = simulate_baseline(net, x, Tiling(4, 4), params=params)
        standalone = simulate_baseline(net, x, Tiling(4, 4), params=params,
                                       fuse_epilogue=False)
        assert folded.output == standalone.output
        assert folded.traffic.intermediate_fmap < standalone.traffic.intermediate_fmap
        assert "conv1" not in [layer for layer, entry in folded.traffic.layers.items()
                               if entry.intermediate_write]

    def test_invalid_stem(self):
        with pytest.raises(ValueError):
            simulate_baseline(toy_net(), None, Tiling(4, 4), fused_stem=3)
        with pytest.raises(ValueError):
            simulate_baseline(residual_block_net(), None, Tiling(4, 4), fused_stem=1)

    def test_tile_smaller_than_kernel(self):
        with pytest.raises(ValueError):
            simulate_baseline(toy_net(), None, Tiling(2, 4))

    def test_invalid_tiling(self):
        with pytest.raises(ValueError):
            Tiling(0, 4)
        with pytest.raises(ValueError):
            Tiling(4, 4, tm=-1)

    def test_wrong_input(self):
        net = toy_net()
        with pytest.raises(ValueError):
            simulate_baseline(net, Tensor4D.zeros((1, 2, 8, 9), FIXED8), Tiling(4, 4))
        with pytest.raises(ValueError):
            simulate_baseline(net, Tensor4D.zeros((1, 2, 8, 8), WEIGHTS), Tiling(4, 4))

    def test_buffer_overflow(self):
        with pytest.raises(BufferOverflowError) as info:
            simulate_baseline(toy_net(), None, Tiling(4, 4), capacities={"input": 1000})
        assert info.value.buffer == "input"
        assert info.value.capacity == 1000
        assert info.value.requested == 1600


class TestFused:
    def test_vdsr_single_group(self):
        net = vdsr()
        plan = plan_from_grouping(net, [20], (27, 48))
        result = simulate_fused(net, None, plan, record_trace=False)
        summary = result.traffic.summary()
        assert summary["intermediate_fmap"] == 0
        assert summary["fmap_total"] / MBIT == 31.640625
        assert summary["residual"] == 0
        assert result.peaks["intermediate_1"] <= plan.buffer_alloc.intermediate_bits
        assert result.peaks["skip_0"] == 27 * 48 * 8
        weights = sum(layer.weight_count for layer in net.layers) * 4
        assert weights == 2658816
        assert plan.buffer_alloc.weight_bits == weights
        assert result.traffic.total("weights") == weights
        assert result.peaks["weights"] == weights

    def test_small_vdsr_exact(self):
        net = preset("vdsr", (24, 24))
        params = init_params(net, seed=1)
        x = random_input(net, np.random.default_rng(1))
        plan = plan_from_grouping(net, [20], 10)
        result = simulate_fused(net, x, plan, params=params)
        assert result.output == blocked_forward(net, params, x, blocking_from_plan(net, plan))
        assert result.trace.undefined_sources() == []
        for name, peak in result.peaks.items():
            assert peak <= result.capacities[name], name

    def test_whole_map_tile_equals_reference(self):
        net = preset("vdsr", (12, 12))
        params = init_params(net, seed=3)
        x = random_input(net, np.random.default_rng(3))
        plan = plan_from_grouping(net, [20], 12)
        result = simulate_fused(net, x, plan, params=params)
        assert result.output == reference_forward(net, params, x)

    def test_random_networks(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            net = random_net(rng)
            params = init_params(net, seed)
            x = random_input(net, rng)
            tile = int(rng.choice([4, 8]))
            plan = plan_from_grouping(net, random_groups(net, rng), tile,
                                      onchip_boundaries=bool(rng.random() < 0.5),
                                      prefetch=bool(rng.random() < 0.3))
            result = simulate_fused(net, x, plan, params=params)
            expected = blocked_forward(net, params, x, blocking_from_plan(net, plan))
            assert verify_equivalence(result.output, expected).passed, seed
            assert result.trace.undefined_sources() == [], seed

    def test_fixed_style_merges(self):
        net = pooled_net()
        params = init_params(net)
        x = random_input(net, np.random.default_rng(8))
        plan = plan_from_grouping(net, [3], 4, styles="F")
        assert len(plan.buffer_alloc.extra_bits) == 2
        result = simulate_fused(net, x, plan, params=params)
        assert result.output == blocked_forward(net, params, x, blocking_from_plan(net, plan))
        assert result.peaks["extra_0"] == 4 * 4 * 4 * 8
        assert result.peaks["extra_1"] == 4 * 4 * 4 * 8
        assert result.trace.count(EventKind.SWAP) > 0
        assert result.trace.undefined_sources() == []

    def test_weights_resident_or_streamed(self):
        net = toy_net()
        plan = plan_from_grouping(net, [3], 4)
        weights = (2 * 4 + 4 * 4 + 4 * 2) * 9 * 8
        assert plan.buffer_alloc.weight_bits == weights
        resident = simulate_fused(net, None, plan)
        assert resident.traffic.total("weights") == weights
        assert resident.peaks["weights"] == weights
        streamed = simulate_fused(net, None, plan, capacities={"weights": 4 * 4 * 9 * 8})
        assert streamed.traffic.total("weights") == 4 * weights
        assert streamed.peaks["weights"] == 4 * 4 * 9 * 8

    def test_weights_loaded_per_group(self):
        net = toy_net()
        plan = plan_from_grouping(net, [1, 2], 4)
        weights = (2 * 4 + 4 * 4 + 4 * 2) * 9 * 8
        result = simulate_fused(net, None, plan, capacities={"weights": (4 * 4 + 4 * 2) * 9 * 8})
        assert result.traffic.total("weights") == weights
        assert result.peaks["weights"] == (4 * 4 + 4 * 2) * 9 * 8

    def test_skip_buffer(self):
        net = residual_block_net()
        params = init_params(net)
        x = random_input(net, np.random.default_rng(9))
        plan = plan_from_grouping(net, [4], 4)
        result = simulate_fused(net, x, plan, params=params)
        assert result.output == blocked_forward(net, params, x, blocking_from_plan(net, plan))
        assert result.peaks["skip_0"] == 4 * 4 * 4 * 8
        assert result.traffic.total("residual") == 0
        assert result.traffic.intermediate_fmap == 0

    def test_onchip_boundaries(self):
        net = residual_block_net()
        groups = [["conv1", "conv2"], ["conv3", "sum", "conv4"]]
        onchip = simulate_fused(net, None, plan_from_grouping(net, groups, 4))
        assert onchip.peaks["boundary"] == 2 * 4 * 64 * 8
        assert onchip.traffic.intermediate_fmap == 0
        assert onchip.traffic.total("residual") == 0
        assert onchip.traffic.fmap_bits == 2 * 64 * 8 + 2 * 64 * 8
        spilled = simulate_fused(net, None,
                                 plan_from_grouping(net, groups, 4, onchip_boundaries=False))
        assert "boundary" not in spilled.peaks
        assert spilled.traffic.total("intermediate_write") == 2 * 4 * 64 * 8
        assert spilled.traffic.total("intermediate_read") == 4 * 64 * 8
        assert spilled.traffic.total("residual") == 4 * 64 * 8

    def test_per_layer_groups_match_baseline(self):
        for net in (toy_net(), residual_block_net(), pooled_net()):
            groups = [[layer.id] for layer in net.compute_layers]
            fused = simulate_fused(net, None, plan_from_grouping(net, groups, 4,
                                                                 onchip_boundaries=False))
            baseline = simulate_baseline(net, None, Tiling(4, 4), halo=False,
                                         fuse_epilogue=False)
            for column in ("input_image", "intermediate_fmap", "output", "residual"):
                assert fused.traffic.summary()[column] == baseline.traffic.summary()[column], \
                    (net.name, column)

    def test_prefetch(self):
        net = pooled_net()
        params = init_params(net)
        x = random_input(net, np.random.default_rng(10))
        plain = simulate_fused(net, x, plan_from_grouping(net, [3], 4), params=params)
        prefetched = simulate_fused(net, x, plan_from_grouping(net, [3], 4, prefetch=True),
                                    params=params)
        assert prefetched.output == plain.output
        assert prefetched.traffic == plain.traffic
        assert prefetched.peaks["intermediate_3"] == 2 * 4 * 4 * 8
        assert "intermediate_3" not in plain.peaks

    def test_buffer_overflow(self):
        net = toy_net()
        with pytest.raises(BufferOverflowError) as info:
            simulate_fused(net, None, plan_from_grouping(net, [3], 4), capacities={"input": 8})
        assert info.value.buffer == "input"
        assert info.value.step == 3
        assert info.value.requested == 2 * 4 * 4 * 8

    def test_blocking_mismatch(self):
        net = toy_net()
        plan = plan_from_grouping(net, [3], 4)
        other = blocking_from_plan(net, plan_from_grouping(net, [3], 8))
        with pytest.raises(PlanMismatchError):
            simulate_fused(net, None, plan, blocking=other)

    def test_trace_file(self):
        net = toy_net()
        result = simulate_fused(net, None, plan_from_grouping(net, [3], 4))
        with tempfile.TemporaryDirectory() as temp_dir:
            path = os.path.join(temp_dir, "trace.jsonl")
            result.trace.to_jsonl(path)
            with open(path, "r", encoding="utf-8") as file:
                events = [json.loads(line) for line in file]
        assert len(events) == len(result.trace)
        assert events[0]["kind"] == "load"
        assert [event["tensor"] for event in events[:4]] == ["w:conv1", "w:conv2", "w:conv3",
                                                             "input[0:4,0:4]"]
        assert [event["step"] for event in events] == list(range(len(events)))


class TestPaddedReads:
    @pytest.mark.parametrize("mode", list(PadMode))
    def test_same_values_as_pad(self, mode):
        row = Tensor4D(np.array([1, 2, 3]).reshape(1, 1, 1, 3), FIXED8)
        index, holds = _source_index(np.arange(-2, 5), 3, mode)
        expected = pad(row, (0, 0, 2, 2), mode).data.ravel()
        assert (row.data.ravel()[index] * holds).tolist() == expected.tolist()

    def test_reflect_beyond_extent(self):
        with pytest.raises(ValueError):
            _source_index(np.arange(-1, 2), 1, PadMode.REFLECT)
        with pytest.raises(ValueError):
            pad(Tensor4D.zeros((1, 1, 1, 1), FIXED8), 1, PadMode.REFLECT)
        with pytest.raises(ValueError):
            _source_index(np.arange(-3, 6), 3, PadMode.REFLECT)
        index, _holds = _source_index(np.arange(0, 1), 1, PadMode.REFLECT)
        assert index.tolist() == [0]


class TestVerify:
    def test_equal(self):
        x = Tensor4D(np.arange(16).reshape(1, 1, 4, 4), FIXED8)
        assert verify_equivalence(x, x).passed

    def test_first_mismatch(self):
        data = np.arange(16).reshape(1, 1, 4, 4)
        changed = data.copy()
        changed[0, 0, 2, 1] = -5
        changed[0, 0, 3, 3] = 0
        verdict = verify_equivalence(Tensor4D(changed, FIXED8), Tensor4D(data, FIXED8))
        assert not verdict.passed
        assert verdict.mismatch_index == (0, 0, 2, 1)
        assert verdict.expected == 9
        assert verdict.actual == -5

    def test_incomparable(self):
        x = Tensor4D.zeros((1, 1, 4, 4), FIXED8)
        with pytest.raises(ValueError):
            verify_equivalence(x, Tensor4D.zeros((1, 1, 4, 5), FIXED8))
        with pytest.raises(ValueError):
            verify_equivalence(x, Tensor4D.zeros((1, 1, 4, 4), WEIGHTS))


class TestTrafficReport:
    def report(self) -> TrafficReport:
        report = TrafficReport()
        report.add("conv1", "input_image", 1024)
        report.add("conv1", "intermediate_write", 2048)
        report.add("conv2", "intermediate_read", 2048)
        report.add("conv2", "output", 512)
        report.add("conv2", "halo", 100)
        return report

    def test_totals(self):
        report = self.report()
        assert report.intermediate_fmap == 4096
        assert report.fmap_bits == 1024 + 4096 + 512
        assert list(report.layers) == ["conv1", "conv2"]
        with pytest.raises(ValueError):
            report.add("conv1", "bandwidth", 1)

    def test_render_parse(self):
        report = self.report()
        for fmt in ("csv", "json"):
            assert traffic_report_parse(traffic_report_render(report, fmt), fmt) == report

    def test_summary_render(self):
        lines = traffic_report_render(self.report(), "csv", summary=True).splitlines()
        assert lines[0] == "tensor_class,bits,mbits"
        assert lines[5] == "fmap_total,5632,0.00537109375"
        records = json.loads(traffic_report_render(self.report(), "json", summary=True))
        assert records[2] == {"tensor_class": "intermediate_fmap", "bits": 4096,
                              "mbits": 4096 / MBIT}

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            traffic_report_render(self.report(), "xml")
        with pytest.raises(ValueError):
            traffic_report_parse("", "xml")

    def test_frame_totals(self):
        frame = traffic_frame(self.report())
        assert frame["layer"].tolist() == ["conv1", "conv2", "total"]
        assert frame.iloc[-1]["intermediate_read"] == 2048
        assert frame.iloc[-1]["input_image"] == 1024
