# Context file to import project modules from test directory.
# This is automatically loaded by pytest.
# https://docs.pytest.org/en/stable/goodpractices.html#tests-outside-application-code

# pylint: disable=missing-module-docstring
import sys
import os

import numpy as np

# Set up the application path for relative imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

# pylint: disable=wrong-import-position
from blkconv.networks import LayerDesc, NetworkDesc
from blkconv.tensors import PadMode, ScalarFormat, Tensor4D, random_tensor

this_dir = os.path.abspath(os.path.dirname(__file__))

def file_path_in_testdir(file_name: str) -> str:
    """Return the full path to a file in the test directory."""
    return os.path.join(this_dir, file_name)


def toy_net(rows: int = 8, cols: int = 8, channels: int = 2) -> NetworkDesc:
    """Three 3x3 convolutions on a small image."""
    return NetworkDesc("toy", (channels, rows, cols), ScalarFormat.parse("fixed8.4"),
                       ScalarFormat.parse("fixed8.6"),
                       (LayerDesc.conv("conv1", channels, 4),
                        LayerDesc.conv("conv2", 4, 4),
                        LayerDesc.conv("conv3", 4, 2, relu=False)))


def random_net(rng: np.random.Generator, max_pools: int = 2) -> NetworkDesc:
    """
    A random chain of convolutions, poolings and residual sums whose blocks
    of 4 or 8 pixels stay valid through every pooling.
    """
    rows = int(rng.choice([16, 24]))
    cols = int(rng.choice([16, 24]))
    in_channels = channels = int(rng.integers(1, 4))
    layers: list[LayerDesc] = []
    pools = 0
    block_start, block_channels = "input", channels
    for index in range(int(rng.integers(2, 7))):
        choice = rng.random()
        if choice < 0.2 and pools < max_pools and index > 0:
            layers.append(LayerDesc.maxpool(f"pool{index}"))
            pools += 1
            block_start, block_channels = f"pool{index}", channels
            continue
        if choice < 0.35 and index > 0 and block_channels == channels \
                and block_start != layers[-1].id:
            layers.append(LayerDesc.eltwise_add(f"sum{index}", block_start,
                                                relu=bool(rng.random() < 0.5)))
            block_start, block_channels = f"sum{index}", channels
            continue
        k = int(rng.choice([1, 3]))
        depthwise = bool(rng.random() < 0.2)
        out_ch = channels if depthwise else int(rng.integers(1, 5))
        pad_mode = PadMode.REPLICATE if rng.random() < 0.2 else PadMode.ZERO
        layers.append(LayerDesc.conv(f"conv{index}", channels, out_ch, k=k, depthwise=depthwise,
                                     relu=bool(rng.random() < 0.7), pad_mode=pad_mode))
        channels = out_ch
    if not any(layer.is_conv for layer in layers):
        layers.append(LayerDesc.conv("conv_last", channels, 2))
    return NetworkDesc("random", (in_channels, rows, cols),
                       ScalarFormat.parse("fixed8.4"), ScalarFormat.parse("fixed8.6"),
                       tuple(layers))


def random_input(net: NetworkDesc, rng: np.random.Generator) -> Tensor4D:
    """A random network input."""
    return random_tensor((1,) + tuple(net.input_shape), net.activation_format, rng)
