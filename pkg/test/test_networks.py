# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring
# pylint: disable=invalid-name,too-few-public-methods,protected-access
import os
import tempfile

import numpy as np
import pytest

from blkconv.networks import (
    INPUT_ID, LayerDesc, LayerKind, NetworkDesc, NetworkError, apply_layer, feature_map_volumes,
    fmap_volume, forward_maps, init_params, load_network, network_from_dict, network_to_dict,
    reference_forward, save_network
)
from blkconv.tensors import PadMode, ScalarFormat, Tensor4D, conv2d_ref
from .conftest import random_input, toy_net


FIXED8 = ScalarFormat.parse("fixed8.4")
WEIGHTS = ScalarFormat.parse("fixed8.6")


def residual_net() -> NetworkDesc:
    return NetworkDesc("res", (4, 16, 16), FIXED8, WEIGHTS, (
        LayerDesc.conv("conv1", 4, 8, stride=2),
        LayerDesc.conv("conv2", 8, 8),
        LayerDesc.conv("conv3", 8, 8, relu=False),
        LayerDesc.eltwise_add("sum", "conv1", relu=True),
        LayerDesc.maxpool("pool"),
    ))


class TestLayerDesc:
    def test_conv_defaults(self):
        layer = LayerDesc.conv("c", 3, 8, k=5)
        assert layer.padding == (2, 2, 2, 2)
        assert layer.relu
        assert layer.weight_count == 8 * 3 * 25

    def test_depthwise_weights(self):
        assert LayerDesc.conv("c", 8, 8, depthwise=True).weight_count == 8 * 9

    def test_maxpool_stride_defaults_to_window(self):
        assert LayerDesc.maxpool("p", k=3).stride == 3
        assert LayerDesc.maxpool("p").weight_count == 0

    def test_dict(self):
        layer = LayerDesc.conv("c", 3, 8, stride=2, padding=(0, 1, 0, 1),
                               pad_mode=PadMode.REPLICATE)
        content = layer.to_dict()
        assert content["padding"] == [0, 1, 0, 1]
        assert content["pad_mode"] == "replicate"
        assert "depthwise" not in content
        assert LayerDesc.from_dict(content) == layer

    @pytest.mark.parametrize("content", [
        {"kind": "conv"},
        {"id": "c", "kind": "convolution"},
        {"id": "c", "kind": "conv", "in_ch": 3},
        {"id": "c", "kind": "conv", "in_ch": 3, "out_ch": 4, "padding": [1, 2, 3]},
        {"id": "s", "kind": "eltwise_add"},
    ])
    def test_invalid_dict(self, content):
        with pytest.raises(NetworkError):
            LayerDesc.from_dict(content)


class TestNetworkDesc:
    def test_input_layer_prepended(self):
        net = toy_net()
        assert net.layers[0].id == INPUT_ID
        assert net.layers[0].kind == LayerKind.INPUT
        assert [layer.id for layer in net.conv_layers] == ["conv1", "conv2", "conv3"]

    def test_shapes(self):
        net = residual_net()
        assert net.shapes == {
            "input": (4, 16, 16), "conv1": (8, 8, 8), "conv2": (8, 8, 8),
            "conv3": (8, 8, 8), "sum": (8, 8, 8), "pool": (8, 4, 4),
        }
        assert net.input_of("conv2") == (8, 8, 8)
        assert net.input_of("conv1") == (4, 16, 16)
        assert net.output_id == "pool"

    def test_graph_queries(self):
        net = residual_net()
        assert net.producer("conv1").id == INPUT_ID
        assert net.producer(INPUT_ID) is None
        assert net.consumers("conv1") == ["conv2", "sum"]
        assert net.consumers("conv3") == ["sum"]
        assert net.index("sum") == 4
        assert [layer.id for layer in net.compute_layers] \
            == ["conv1", "conv2", "conv3", "sum", "pool"]

    def test_unknown_layer(self):
        with pytest.raises(NetworkError) as info:
            toy_net().layer("conv9")
        assert info.value.layer == "conv9"

    def test_duplicate_id(self):
        with pytest.raises(NetworkError):
            NetworkDesc("n", (2, 8, 8), FIXED8, WEIGHTS,
                        (LayerDesc.conv("c", 2, 2), LayerDesc.conv("c", 2, 2)))

    def test_channel_mismatch(self):
        with pytest.raises(NetworkError) as info:
            NetworkDesc("n", (2, 8, 8), FIXED8, WEIGHTS,
                        (LayerDesc.conv("c1", 2, 4), LayerDesc.conv("c2", 2, 4)))
        assert info.value.layer == "c2"

    def test_residual_must_precede(self):
        with pytest.raises(NetworkError):
            NetworkDesc("n", (2, 8, 8), FIXED8, WEIGHTS,
                        (LayerDesc.eltwise_add("s", "c1"), LayerDesc.conv("c1", 2, 2)))

    def test_residual_shape_mismatch(self):
        with pytest.raises(NetworkError):
            NetworkDesc("n", (2, 8, 8), FIXED8, WEIGHTS,
                        (LayerDesc.conv("c1", 2, 4), LayerDesc.eltwise_add("s", "input")))

    def test_depthwise_channels(self):
        with pytest.raises(NetworkError):
            NetworkDesc("n", (2, 8, 8), FIXED8, WEIGHTS,
                        (LayerDesc.conv("c1", 2, 4, depthwise=True),))

    def test_extent_too_small(self):
        with pytest.raises(NetworkError):
            NetworkDesc("n", (2, 2, 2), FIXED8, WEIGHTS,
                        (LayerDesc.conv("c1", 2, 2, k=5, padding=0),))

    def test_invalid_input_shape(self):
        with pytest.raises(NetworkError):
            NetworkDesc("n", (2, 0, 8), FIXED8, WEIGHTS, (LayerDesc.conv("c1", 2, 2),))

    def test_with_formats(self):
        net = toy_net().with_formats(ScalarFormat.parse("fixed16.8"))
        assert net.activation_format.bitwidth == 16
        assert net.weight_format == WEIGHTS
        assert net.shapes == toy_net().shapes


class TestVolumes:
    def test_fmap_volume(self):
        assert fmap_volume((64, 224, 224), 16) == 49.0
        assert fmap_volume((8, 1024, 1024), 8, "MB") == 8.0
        assert fmap_volume((1, 1, 1), 8, "bit") == 8

    def test_unknown_unit(self):
        with pytest.raises(ValueError):
            fmap_volume((1, 1, 1), 8, "GB")

    def test_frame(self):
        frame = feature_map_volumes(residual_net(), unit="Kbit")
        assert list(frame.columns) == ["layer", "kind", "channels", "height", "width", "Kbit"]
        assert frame["layer"].tolist() == ["conv1", "conv2", "conv3"]
        assert frame["Kbit"].tolist() == [4.0, 4.0, 4.0]

    def test_frame_all_layers(self):
        frame = feature_map_volumes(residual_net(), unit="bit", bits=1, conv_only=False)
        assert frame["layer"].tolist() == ["conv1", "conv2", "conv3", "sum", "pool"]
        assert frame["bit"].tolist()[-1] == 8 * 4 * 4


class TestFiles:
    def test_dict(self):
        net = residual_net()
        content = network_to_dict(net)
        assert content["input_shape"] == [4, 16, 16]
        assert content["activation_format"] == "fixed8.4"
        assert [layer["id"] for layer in content["layers"]] \
            == ["conv1", "conv2", "conv3", "sum", "pool"]
        assert network_from_dict(content) == net

    def test_save_load(self):
        net = residual_net()
        with tempfile.TemporaryDirectory() as temp_dir:
            path = os.path.join(temp_dir, "net.json")
            save_network(net, path)
            assert load_network(path) == net

    def test_load_yaml(self):
        text = ("name: small\ninput_shape: [1, 8, 8]\nactivation_format: fixed8.4\n"
                "layers:\n  - {id: c1, kind: conv, in_ch: 1, out_ch: 2, k: 3, padding: 1}\n"
                "  - {id: p1, kind: maxpool}\n")
        with tempfile.TemporaryDirectory() as temp_dir:
            path = os.path.join(temp_dir, "net.yaml")
            with open(path, "w", encoding="utf-8") as file:
                file.write(text)
            net = load_network(path)
        assert net.name == "small"
        assert net.shape("p1") == (2, 4, 4)
        assert net.weight_format == ScalarFormat.parse("fixed8")

    def test_load_malformed(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            path = os.path.join(temp_dir, "net.yaml")
            with open(path, "w", encoding="utf-8") as file:
                file.write("layers: [unclosed\n")
            with pytest.raises(NetworkError):
                load_network(path)

    @pytest.mark.parametrize("content", [
        [],
        {"layers": []},
        {"input_shape": [1, 8, 8], "activation_format": "fixed7", "layers": []},
    ])
    def test_invalid_description(self, content):
        with pytest.raises(NetworkError):
            network_from_dict(content)


class TestEvaluation:
    def test_params_deterministic(self):
        net = toy_net()
        first, second = init_params(net, seed=5), init_params(net, seed=5)
        assert set(first) == {"conv1", "conv2", "conv3"}
        for layer_id, params in first.items():
            assert params.weights == second[layer_id].weights
            assert np.array_equal(params.bias, second[layer_id].bias)
        assert first["conv2"].weights.dims == (4, 4, 3, 3)
        assert first["conv2"].weights.fmt == WEIGHTS

    def test_forward_maps(self):
        net = residual_net()
        params = init_params(net)
        x = random_input(net, np.random.default_rng(1))
        maps = forward_maps(net, params, x)
        assert maps[INPUT_ID] == x
        for layer_id, shape in net.shapes.items():
            assert maps[layer_id].dims == (1,) + shape
            assert maps[layer_id].fmt == FIXED8
        assert reference_forward(net, params, x) == maps["pool"]
        conv1 = conv2d_ref(x, params["conv1"].weights, params["conv1"].bias, stride=2,
                           padding=1, relu=True, out_fmt=FIXED8)
        assert maps["conv1"] == conv1

    def test_sum_layer(self):
        net = residual_net()
        params = init_params(net)
        maps = forward_maps(net, params, random_input(net, np.random.default_rng(2)))
        total = maps["conv3"].data + maps["conv1"].data
        assert np.array_equal(maps["sum"].data, FIXED8.saturate(np.maximum(total, 0)))

    def test_wrong_input_dims(self):
        net = toy_net()
        with pytest.raises(ValueError):
            forward_maps(net, init_params(net), Tensor4D.zeros((1, 2, 8, 9), FIXED8))

    def test_missing_params(self):
        with pytest.raises(ValueError):
            apply_layer(LayerDesc.conv("c", 2, 2), Tensor4D.zeros((1, 2, 4, 4), FIXED8))
