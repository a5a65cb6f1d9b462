"""Builds the small ONNX graphs used by the backbone tests.

Run from this directory: python3 make_fixtures.py
Writes tiny_resnet.onnx, tiny_vgg.onnx, their reference activations and a
descriptor registry in the format the model-export scripts emit.
"""
import json

import numpy as np
import torch
from torch import nn

SIDE = 32
OPSET = 17


class Block(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        y = torch.relu(self.bn1(self.conv1(x)))
        return torch.relu(self.bn2(self.conv2(y)) + idt)


class TinyResNet(nn.Module):
    """ResNet layout truncated at the global average pool."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, 8, 7, 2, 3, bias=False), nn.BatchNorm2d(8), nn.ReLU(),
                                  nn.MaxPool2d(3, 2, 1))
        self.layer1 = Block(8, 8, 1)
        self.layer2 = Block(8, 16, 2)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.layer2(self.layer1(self.stem(x)))), 1)


class TinyVgg(nn.Module):
    """VGG/AlexNet layout truncated after the first FC layer's ReLU."""

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(8, 8, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2, 2, ceil_mode=True),
            nn.AvgPool2d(2, 2))
        self.fc1 = nn.Linear(8 * 4 * 4, 24)

    def forward(self, x):
        return torch.relu(self.fc1(torch.flatten(self.features(x), 1)))


def randomise_bn(model, gen):
    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.running_mean.copy_(torch.randn(m.num_features, generator=gen) * 0.1)
            m.running_var.copy_(torch.rand(m.num_features, generator=gen) + 0.5)
            m.weight.data.copy_(torch.rand(m.num_features, generator=gen) + 0.5)
            m.bias.data.copy_(torch.randn(m.num_features, generator=gen) * 0.1)


def main():
    gen = torch.Generator().manual_seed(20240601)
    torch.manual_seed(20240601)
    x = torch.rand(1, 3, SIDE, SIDE, generator=gen) * 4 - 2
    registry = []
    references = {"input_side": SIDE, "input": x.flatten().tolist(), "outputs": {}}
    for name, model, layer in [("tiny_resnet", TinyResNet(), "GlobalAveragePool"),
                               ("tiny_vgg", TinyVgg(), "FirstFullyConnected")]:
        randomise_bn(model, gen)
        model.eval()
        with torch.no_grad():
            y = model(x)
        torch.onnx.export(model, (x,), f"{name}.onnx", input_names=["input"], output_names=["features"],
                          opset_version=OPSET, dynamo=False)
        references["outputs"][name] = y.flatten().tolist()
        registry.append({
            "id": name, "graph_path": f"{name}.onnx", "feature_layer": layer,
            "feature_dim": int(y.shape[1]), "input_size": SIDE,
            "channel_means": [0.485, 0.456, 0.406], "channel_stds": [0.229, 0.224, 0.225], "opset": OPSET,
        })
    with open("reference.json", "w") as f:
        json.dump(references, f)
    with open("registry.json", "w") as f:
        json.dump(registry, f, indent=2)


if __name__ == "__main__":
    main()
