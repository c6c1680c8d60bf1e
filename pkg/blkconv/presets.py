"""
Built-in networks (convolutional bodies only; fully-connected layers are not
modelled) and packaged hardware budgets.

Networks:
    vgg16-conv: the 13 convolutions and 5 poolings of VGG-16.
    vdsr: 20 convolutions of 3x3 and a global residual sum with the input image.
    resnet18-conv: ResNet-18 basic blocks. The 3x3/2 stem pooling is a 2x2/2
      pooling (pooling has no padding here), and the first block of every
      down-sampling stage has no residual sum, since 1x1 projection shortcuts
      are not expressible in a chain with residual edges.
    mobilenet-v1-conv: the stem convolution and the 13 depthwise/pointwise pairs.

Layer names follow the usual definitions of these networks
(conv1_1 ... conv5_3, conv2_1a/conv2_1b, conv1_dw/conv1_pw).
"""
import logging
import os
from typing import Callable, Optional, Union

from .networks import LayerDesc, NetworkDesc
from .tensors import ScalarFormat


DATA_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "data"))

HW = Optional[tuple[int, int]]


def vgg16_conv(input_hw: HW = None, activation: str = "fixed16.8",
               weights: str = "fixed16.14") -> NetworkDesc:
    """VGG-16 convolutional body on a 224x224 RGB image by default."""
    rows, cols = input_hw or (224, 224)
    stages = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))
    layers = []
    in_ch = 3
    for stage, (convs, out_ch) in enumerate(stages, start=1):
        for index in range(1, convs + 1):
            layers.append(LayerDesc.conv(f"conv{stage}_{index}", in_ch, out_ch))
            in_ch = out_ch
        layers.append(LayerDesc.maxpool(f"pool{stage}"))
    return NetworkDesc("vgg16-conv", (3, rows, cols), ScalarFormat.parse(activation),
                       ScalarFormat.parse(weights), tuple(layers))


def vdsr(input_hw: HW = None, activation: str = "fixed8.4",
         weights: str = "fixed4.3") -> NetworkDesc:
    """VDSR on a 1080x1920 single-channel image by default."""
    rows, cols = input_hw or (1080, 1920)
    layers = [LayerDesc.conv("conv1", 1, 64)]
    layers += [LayerDesc.conv(f"conv{index}", 64, 64) for index in range(2, 20)]
    layers.append(LayerDesc.conv("conv20", 64, 1, relu=False))
    layers.append(LayerDesc.eltwise_add("sum", "input"))
    return NetworkDesc("vdsr", (1, rows, cols), ScalarFormat.parse(activation),
                       ScalarFormat.parse(weights), tuple(layers))


def resnet18_conv(input_hw: HW = None, activation: str = "fixed16.8",
                  weights: str = "fixed16.14") -> NetworkDesc:
    """ResNet-18 convolutional body on a 224x224 RGB image by default."""
    rows, cols = input_hw or (224, 224)
    layers = [LayerDesc.conv("conv1", 3, 64, k=7, stride=2), LayerDesc.maxpool("pool1")]
    in_ch, block_input = 64, "pool1"
    for stage, out_ch in enumerate((64, 128, 256, 512), start=2):
        for block in (1, 2):
            stride = 2 if (block == 1 and stage > 2) else 1
            name = f"conv{stage}_{block}"
            layers.append(LayerDesc.conv(f"{name}a", in_ch, out_ch, stride=stride))
            layers.append(LayerDesc.conv(f"{name}b", out_ch, out_ch, relu=False))
            if stride == 1 and in_ch == out_ch:
                layers.append(LayerDesc.eltwise_add(f"add{stage}_{block}", block_input,
                                                    relu=True))
                block_input = f"add{stage}_{block}"
            else:
                block_input = f"{name}b"
            in_ch = out_ch
    return NetworkDesc("resnet18-conv", (3, rows, cols), ScalarFormat.parse(activation),
                       ScalarFormat.parse(weights), tuple(layers))


def mobilenet_v1_conv(input_hw: HW = None, activation: str = "fixed16.8",
                      weights: str = "fixed16.14") -> NetworkDesc:
    """MobileNet-V1 convolutional body on a 224x224 RGB image by default."""
    rows, cols = input_hw or (224, 224)
    pairs = ((64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
             (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1))
    layers = [LayerDesc.conv("conv0", 3, 32, stride=2)]
    in_ch = 32
    for index, (out_ch, stride) in enumerate(pairs, start=1):
        layers.append(LayerDesc.conv(f"conv{index}_dw", in_ch, in_ch, stride=stride,
                                     depthwise=True))
        layers.append(LayerDesc.conv(f"conv{index}_pw", in_ch, out_ch, k=1))
        in_ch = out_ch
    return NetworkDesc("mobilenet-v1-conv", (3, rows, cols), ScalarFormat.parse(activation),
                       ScalarFormat.parse(weights), tuple(layers))


PRESETS: dict[str, Callable[..., NetworkDesc]] = {
    "vgg16-conv": vgg16_conv,
    "vdsr": vdsr,
    "resnet18-conv": resnet18_conv,
    "mobilenet-v1-conv": mobilenet_v1_conv,
}


def preset(name: str, input_hw: HW = None) -> NetworkDesc:
    """
    A built-in network.

    Args:
        name: One of the keys of PRESETS.
        input_hw: Optional (rows, cols) of the input image.
    """
    try:
        builder = PRESETS[name]
    except KeyError as error:
        raise ValueError(f"Unknown preset {name}, expected one of {list(PRESETS)}") from error
    net = builder(input_hw)
    logging.debug("Preset %s: %d layers", name, len(net.layers))
    return net


def available_budgets() -> dict[str, str]:
    """
    Available hardware budget YAML files.

    Returns:
        A dictionary whose keys are the names of the packaged budget files,
        and the values are the contents of the files.
    """
    yaml_files = sorted([
        f for f in os.listdir(DATA_DIR)
        if f.endswith(".yaml") and os.path.isfile(os.path.join(DATA_DIR, f))
    ])
    logging.info("There are %d available hardware budget files in %s",
                 len(yaml_files), DATA_DIR)
    result = {}
    for yaml_file in yaml_files:
        path = os.path.join(DATA_DIR, yaml_file)
        with open(path, "r", encoding="utf-8") as file:
            result[yaml_file] = file.read()
    return result


def budget_path(choice: Union[int, str]) -> str:
    """
    Path of a hardware budget file.

    Args:
        choice: The 1-based number of a packaged budget file, the name of one
          (with or without `.yaml`), or a path.
    """
    budgets = list(available_budgets())
    if isinstance(choice, int):
        if not 1 <= choice <= len(budgets):
            raise ValueError(f"Invalid budget number: {choice}")
        return os.path.join(DATA_DIR, budgets[choice - 1])
    for name in (choice, f"{choice}.yaml"):
        if name in budgets:
            return os.path.join(DATA_DIR, name)
    return choice
