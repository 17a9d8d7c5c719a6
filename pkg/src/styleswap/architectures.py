"""The four classifier architectures, adapted to 32x32 inputs and 10 classes.

Every network exposes forward_features(x) -> (N, D) penultimate activations
(used by the robust-feature distillation) alongside the usual forward.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

SUPPORTED_ARCHS = ("ResNet18", "VGG19", "DenseNet121", "GoogLeNet")


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    def __init__(self, num_classes=10):
        super().__init__()
        self.in_planes = 64
        self.conv1 = nn.Conv2d(3, 64, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.layer1 = self._make_layer(64, 2, 1)
        self.layer2 = self._make_layer(128, 2, 2)
        self.layer3 = self._make_layer(256, 2, 2)
        self.layer4 = self._make_layer(512, 2, 2)
        self.linear = nn.Linear(512, num_classes)

    def _make_layer(self, planes, num_blocks, stride):
        layers = []
        for s in [stride] + [1] * (num_blocks - 1):
            layers.append(BasicBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward_features(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)

    def forward(self, x):
        return self.linear(self.forward_features(x))


_VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
              512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]


class VGG19(nn.Module):
    def __init__(self, num_classes=10):
        super().__init__()
        layers, in_ch = [], 3
        for v in _VGG19_CFG:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [nn.Conv2d(in_ch, v, 3, padding=1),
                           nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
                in_ch = v
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(512, num_classes)

    def forward_features(self, x):
        return self.features(x).flatten(1)

    def forward(self, x):
        return self.classifier(self.forward_features(x))


class _DenseLayer(nn.Module):
    def __init__(self, in_ch, growth):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, 4 * growth, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(4 * growth)
        self.conv2 = nn.Conv2d(4 * growth, growth, 3, padding=1, bias=False)

    def forward(self, x):
        out = self.conv1(F.relu(self.bn1(x)))
        out = self.conv2(F.relu(self.bn2(out)))
        return torch.cat([x, out], 1)


class _Transition(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.bn = nn.BatchNorm2d(in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        return F.avg_pool2d(self.conv(F.relu(self.bn(x))), 2)


class DenseNet121(nn.Module):
    def __init__(self, num_classes=10, growth=32):
        super().__init__()
        blocks = [6, 12, 24, 16]
        ch = 2 * growth
        self.conv1 = nn.Conv2d(3, ch, 3, padding=1, bias=False)
        stages = []
        for i, n in enumerate(blocks):
            for _ in range(n):
                stages.append(_DenseLayer(ch, growth))
                ch += growth
            if i < len(blocks) - 1:
                stages.append(_Transition(ch, ch // 2))
                ch //= 2
        self.dense = nn.Sequential(*stages)
        self.bn = nn.BatchNorm2d(ch)
        self.linear = nn.Linear(ch, num_classes)

    def forward_features(self, x):
        out = self.dense(self.conv1(x))
        out = F.adaptive_avg_pool2d(F.relu(self.bn(out)), 1)
        return out.flatten(1)

    def forward(self, x):
        return self.linear(self.forward_features(x))


class _Inception(nn.Module):
    def __init__(self, in_ch, n1, n3r, n3, n5r, n5, pool_ch):
        super().__init__()
        def cbr(i, o, k, p=0):
            return nn.Sequential(nn.Conv2d(i, o, k, padding=p, bias=False),
                                 nn.BatchNorm2d(o), nn.ReLU(True))
        self.b1 = cbr(in_ch, n1, 1)
        self.b2 = nn.Sequential(cbr(in_ch, n3r, 1), cbr(n3r, n3, 3, 1))
        self.b3 = nn.Sequential(cbr(in_ch, n5r, 1), cbr(n5r, n5, 3, 1), cbr(n5, n5, 3, 1))
        self.b4 = nn.Sequential(nn.MaxPool2d(3, 1, 1), cbr(in_ch, pool_ch, 1))

    def forward(self, x):
        return torch.cat([self.b1(x), self.b2(x), self.b3(x), self.b4(x)], 1)


class GoogLeNet(nn.Module):
    def __init__(self, num_classes=10):
        super().__init__()
        self.pre = nn.Sequential(nn.Conv2d(3, 192, 3, padding=1, bias=False),
                                 nn.BatchNorm2d(192), nn.ReLU(True))
        self.a3 = _Inception(192, 64, 96, 128, 16, 32, 32)
        self.b3 = _Inception(256, 128, 128, 192, 32, 96, 64)
        self.a4 = _Inception(480, 192, 96, 208, 16, 48, 64)
        self.b4 = _Inception(512, 160, 112, 224, 24, 64, 64)
        self.c4 = _Inception(512, 128, 128, 256, 24, 64, 64)
        self.d4 = _Inception(512, 112, 144, 288, 32, 64, 64)
        self.e4 = _Inception(528, 256, 160, 320, 32, 128, 128)
        self.a5 = _Inception(832, 256, 160, 320, 32, 128, 128)
        self.b5 = _Inception(832, 384, 192, 384, 48, 128, 128)
        self.pool = nn.MaxPool2d(3, 2, 1)
        self.linear = nn.Linear(1024, num_classes)

    def forward_features(self, x):
        out = self.b3(self.a3(self.pre(x)))
        out = self.pool(out)
        out = self.e4(self.d4(self.c4(self.b4(self.a4(out)))))
        out = self.pool(out)
        out = self.b5(self.a5(out))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)

    def forward(self, x):
        return self.linear(self.forward_features(x))


_FACTORY = {"ResNet18": ResNet18, "VGG19": VGG19,
            "DenseNet121": DenseNet121, "GoogLeNet": GoogLeNet}


def make_arch(arch: str, num_classes: int = 10, seed: int = 0) -> nn.Module:
    """Instantiate a supported architecture with seed-determined init."""
    if arch not in _FACTORY:
        raise ValueError(f"unknown arch {arch!r}; supported: {', '.join(SUPPORTED_ARCHS)}")
    torch.manual_seed(seed)
    return _FACTORY[arch](num_classes=num_classes)
