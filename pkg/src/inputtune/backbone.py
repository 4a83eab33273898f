"""Residual convolutional feature extractors with named parameter subsets.

Parameter names follow the torchvision ResNet layout (``conv1``, ``bn1``,
``layerK.i.conv1`` ...) so that ImageNet weights can be loaded into the
18-layer variant with ``load_state_dict(strict=False)``.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import InsertionPointUnavailable, ShapeMismatch, UnknownBlockNames

BN_POLICIES = ("running", "frozen_pretrained")


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = None
        if stride != 1 or in_planes != planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNetBackbone(nn.Module):
    """ResNet feature extractor ``m``: image batch -> pooled feature vectors.

    ``last_block`` and ``last_two_blocks`` name the block subsets tuned by the
    partial fine-tuning strategies; ``latent_point`` names where a latent frame
    may be inserted (after the stem).
    """

    def __init__(self, layers=(2, 2, 2, 2), widths=(64, 128, 256, 512), in_channels=3,
                 input_side=224, small_stem=False, bn_policy="running",
                 last_block=None, last_two_blocks=None, variant="custom"):
        super().__init__()
        if bn_policy not in BN_POLICIES:
            raise ValueError(f"bn_policy must be one of {BN_POLICIES}")
        self.variant = variant
        self.in_channels = in_channels
        self.input_side = input_side
        self.bn_policy = bn_policy
        self.small_stem = small_stem

        stem_width = widths[0]
        if small_stem:
            self.conv1 = nn.Conv2d(in_channels, stem_width, 3, 1, 1, bias=False)
            self.maxpool = nn.Identity()
            self.stem_stride = 1
        else:
            self.conv1 = nn.Conv2d(in_channels, stem_width, 7, 2, 3, bias=False)
            self.maxpool = nn.MaxPool2d(3, 2, 1)
            self.stem_stride = 4
        self.bn1 = nn.BatchNorm2d(stem_width)
        self.relu = nn.ReLU(inplace=True)

        planes = stem_width
        self.block_names: list[str] = []
        for k, (n, w) in enumerate(zip(layers, widths), start=1):
            blocks = []
            for i in range(n):
                stride = 2 if (k > 1 and i == 0) else 1
                blocks.append(BasicBlock(planes, w, stride))
                planes = w
                self.block_names.append(f"layer{k}.{i}")
            setattr(self, f"layer{k}", nn.Sequential(*blocks))
        self.num_stages = len(layers)
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = planes
        self.latent_channels = stem_width
        self.latent_point = "stem"

        self.last_block = list(last_block or [self.block_names[-1]])
        self.last_two_blocks = list(last_two_blocks or self.block_names[-2:])
        self._check_selectors()

    # --- parameter subsets ---------------------------------------------

    def _check_selectors(self):
        known = set(self.block_names)
        missing = [b for b in self.last_block + self.last_two_blocks if b not in known]
        if missing:
            raise UnknownBlockNames(f"backbone has no blocks named {missing}")
        if not set(self.last_block) <= set(self.last_two_blocks):
            raise UnknownBlockNames("last_block must be contained in last_two_blocks")

    def _block(self, name):
        stage, idx = name.split(".")
        return getattr(self, stage)[int(idx)]

    def block_parameter_names(self, block_names) -> list[str]:
        out = []
        for b in block_names:
            out.extend(f"{b}.{n}" for n, _ in self._block(b).named_parameters())
        return out

    def bias_parameter_names(self) -> list[str]:
        """Bias-like parameters: BatchNorm shifts plus any conv/linear biases."""
        names = []
        for n, p in self.named_parameters():
            if n.endswith(".bias"):
                names.append(n)
        return names

    def latent_side(self) -> int:
        return self.input_side // self.stem_stride

    @property
    def last_conv_module(self) -> nn.Module:
        return self._block(self.block_names[-1])

    # --- forward -------------------------------------------------------

    def stem(self, x):
        return self.maxpool(self.relu(self.bn1(self.conv1(x))))

    def trunk(self, h):
        for k in range(1, self.num_stages + 1):
            h = getattr(self, f"layer{k}")(h)
        return h

    def forward(self, x, latent_transform=None, return_activation=False):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"backbone expects N x {self.in_channels} x H x W, got {tuple(x.shape)}"
            )
        h = self.stem(x)
        if latent_transform is not None:
            h = latent_transform(h)
        act = self.trunk(h)
        feats = torch.flatten(self.avgpool(act), 1)
        if return_activation:
            return feats, act
        return feats

    def train(self, mode: bool = True):
        super().train(mode)
        if self.bn_policy == "frozen_pretrained":
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self

    def check_insertion_point(self, name: str) -> None:
        if name not in (None, "stem"):
            raise InsertionPointUnavailable(
                f"latent frame insertion point {name!r} not available; this backbone supports 'stem'"
            )


def tiny_resnet(in_channels=3, input_side=32, widths=(16, 32, 64, 128), bn_policy="running"):
    """Four BasicBlocks (one per stage) with a stride-1 3x3 stem."""
    return ResNetBackbone(layers=(1, 1, 1, 1), widths=widths, in_channels=in_channels,
                          input_side=input_side, small_stem=True, bn_policy=bn_policy,
                          variant="tiny")


def resnet18(in_channels=3, input_side=224, bn_policy="running"):
    """The standard 18-layer layout; last block = layer4.1, last two = layer4.0 + layer4.1."""
    return ResNetBackbone(layers=(2, 2, 2, 2), widths=(64, 128, 256, 512),
                          in_channels=in_channels, input_side=input_side, small_stem=False,
                          bn_policy=bn_policy, variant="resnet18")


def load_torchvision_resnet18(bn_policy="running"):
    """Copy torchvision's ImageNet ResNet-18 weights (downloads on first use)."""
    import torchvision

    ref = torchvision.models.resnet18(weights=torchvision.models.ResNet18_Weights.DEFAULT)
    net = resnet18(bn_policy=bn_policy)
    state = {k: v for k, v in ref.state_dict().items() if not k.startswith("fc.")}
    net.load_state_dict(state, strict=True)
    return net


def build_backbone(variant: str, **kwargs) -> ResNetBackbone:
    if variant == "tiny":
        return tiny_resnet(**kwargs)
    if variant == "resnet18":
        return resnet18(**kwargs)
    raise ValueError(f"unknown backbone variant {variant!r}")


def backbone_spec(net: ResNetBackbone) -> dict:
    return {"variant": net.variant, "in_channels": net.in_channels, "input_side": net.input_side,
            "bn_policy": net.bn_policy}
