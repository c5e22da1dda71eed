"""Feature extractor, identity classifier and the inference embedding path.

Two backbone presets:

* ``paper``: ResNet-50 with the last stage kept at stride 1 (overall stride
  16), so a 256x128 image gives a 16x8x2048 feature map.
* ``desk``: a small plain conv net with the same overall stride of 16,
  trainable on a CPU in minutes.

The classifier is pool -> per-channel batch norm -> bias-free linear layer.
The normalized pooled vector is the retrieval embedding.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch

PRESETS = ("paper", "desk")
POOLINGS = ("avg", "max")
STRIDE = 16


@dataclass
class ModelConfig:
    preset: str = "desk"
    num_classes: int = 50
    image_h: int = 128
    image_w: int = 64
    desk_widths: tuple = (16, 32, 64, 64)
    pooling: str = "avg"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.image_h % STRIDE or self.image_w % STRIDE:
            raise ValueError(f"image size must be a multiple of {STRIDE}, got {self.image_h}x{self.image_w}")
        self.desk_widths = tuple(int(w) for w in self.desk_widths)

    @property
    def channels(self) -> int:
        return 2048 if self.preset == "paper" else self.desk_widths[-1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // STRIDE, self.image_w // STRIDE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["desk_widths"] = list(self.desk_widths)
        return d


def _conv_bn_relu(cin, cout, stride):
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class DeskBackbone(nn.Module):
    """Stem at stride 2, then four two-conv stages at strides 2, 2, 2, 1."""

    def __init__(self, widths=(16, 32, 64, 64)):
        super().__init__()
        stem = widths[0]
        layers = _conv_bn_relu(3, stem, 2)
        cin = stem
        for cout, stride in zip(widths, (2, 2, 2, 1)):
            layers += _conv_bn_relu(cin, cout, stride) + _conv_bn_relu(cout, cout, 1)
            cin = cout
        self.body = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        return self.body(x)


class ResNet50Backbone(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        # last stage at stride 1: 256x128 -> 16x8
        net.layer4[0].conv2.stride = (1, 1)
        net.layer4[0].downsample[0].stride = (1, 1)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)

    def forward(self, x):
        return self.body(x)


class Classifier(nn.Module):
    def __init__(self, channels: int, num_classes: int, pooling: str = "avg"):
        super().__init__()
        self.pooling = pooling
        self.bn = nn.BatchNorm1d(channels)
        self.fc = nn.Linear(channels, num_classes, bias=False)
        nn.init.normal_(self.fc.weight, std=0.001)

    def pool(self, maps: torch.Tensor) -> torch.Tensor:
        if self.pooling == "max":
            return maps.amax(dim=(2, 3))
        return maps.mean(dim=(2, 3))

    def normalize(self, pooled: torch.Tensor, update_stats: bool = True, frozen: bool = False) -> torch.Tensor:
        bn = self.bn
        weight, bias = bn.weight, bn.bias
        if frozen:
            weight, bias = weight.detach(), bias.detach()
        if self.training and not update_stats:
            # batch statistics without touching the running estimates
            return F.batch_norm(pooled, None, None, weight, bias, True, 0.0, bn.eps)
        return F.batch_norm(pooled, bn.running_mean, bn.running_var, weight, bias,
                            self.training, bn.momentum, bn.eps)

    def forward(self, maps: torch.Tensor, update_stats: bool = True, frozen: bool = False) -> torch.Tensor:
        """Logits. ``frozen`` stops gradients into the classifier's own parameters."""
        if maps.dim() != 4 or maps.shape[1] != self.bn.num_features:
            raise ShapeMismatch(f"classifier expects {self.bn.num_features} channels, got shape {tuple(maps.shape)}")
        weight = self.fc.weight.detach() if frozen else self.fc.weight
        return F.linear(self.normalize(self.pool(maps), update_stats, frozen), weight)


class ReIDModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        if self.cfg.preset == "paper":
            self.extractor = ResNet50Backbone()
        else:
            self.extractor = DeskBackbone(self.cfg.desk_widths)
        self.classifier = Classifier(self.cfg.channels, self.cfg.num_classes, self.cfg.pooling)

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        expected = (3, self.cfg.image_h, self.cfg.image_w)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeMismatch(f"expected images of shape (B, {expected}), got {tuple(images.shape)}")
        return self.extractor(images)

    def classify(self, maps: torch.Tensor, update_stats: bool = True, frozen: bool = False) -> torch.Tensor:
        return self.classifier(maps, update_stats, frozen)

    def embed_maps(self, maps: torch.Tensor) -> torch.Tensor:
        c = self.classifier
        return c.normalize(c.pool(maps))

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.embed_maps(self.extract(images))

    def forward(self, images):
        return self.classify(self.extract(images))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_flops(model: ReIDModel) -> int:
    """Forward FLOPs of the embedding path for one image (multiply-add = 2)."""
    from torch.utils.flop_counter import FlopCounterMode

    was_training = model.training
    model.eval()
    x = torch.zeros(1, 3, model.cfg.image_h, model.cfg.image_w)
    with torch.no_grad(), FlopCounterMode(display=False) as counter:
        model.embed(x)
    model.train(was_training)
    return counter.get_total_flops()
