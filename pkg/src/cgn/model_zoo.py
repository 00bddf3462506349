"""Networks of the counterfactual generating model.

A weight-shared extractor maps the target and the mirrored reference image to
feature maps ``H_T`` and ``H_R``. The generator re-styles ``H_T`` with the
reference statistics through AdaIN and refines it with residual blocks to
produce the counterfactual ``H_C``. A discriminator separates ``H_C`` from
``H_R``; the fusion classifier reads ``[H_T - H_C, H_T]`` and exposes a
class activation map.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ADAIN_EPS = 1e-5
BACKBONES = ("small-conv", "alexnet-like", "resnet-like")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "small-conv"
    feature_channels: int = 32
    generator_blocks: int = 9
    alpha: float = 0.5
    discriminator_depth: int = 2
    discriminator_patch: bool = False
    fusion_channels: int = 32
    zero_init_residual: bool = True
    backbone_width: int = 16

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.generator_blocks < 1:
            raise ValueError("generator_blocks must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.discriminator_depth < 1 or self.feature_channels < 1:
            raise ValueError("discriminator_depth and feature_channels must be >= 1")

    def to_dict(self):
        return asdict(self)


# -- feature extractors --------------------------------------------------------


INPUT_MEAN = 0.4
INPUT_STD = 0.15


def _kaiming(module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class SmallConv(nn.Module):
    """Desk-scale backbone: fixed 4x average pooling then four convolution blocks.

    224x224 input -> C x 7 x 7 features. The pooling has no parameters, so
    callers may apply :meth:`pool` once and cache it (see ``forward_pooled``).
    """

    def __init__(self, channels, width=16):
        super().__init__()
        w1, w2, w3 = max(width // 2, 1), width, 2 * width
        self.convs = nn.ModuleList([
            nn.Conv2d(1, w1, 5, stride=2, padding=2),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1),
            nn.Conv2d(w3, channels, 3, padding=1),
        ])
        _kaiming(self)

    @staticmethod
    def pool(x):
        return F.avg_pool2d(x, 4)

    def forward_pooled(self, x):
        x = (x - INPUT_MEAN) / INPUT_STD
        for conv in self.convs[:-1]:
            x = F.relu(conv(x))
        # linear output layer: a rectified output can die and freeze the whole model
        return self.convs[-1](x)

    def forward(self, x):
        return self.forward_pooled(self.pool(x))


class AlexNetLike(nn.Module):
    """Reduced-width AlexNet layout: 224x224 -> C x 13 x 13."""

    def __init__(self, channels):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 24, kernel_size=11, stride=4, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(3, 2),
            nn.Conv2d(24, 48, kernel_size=5, padding=2),
            nn.ReLU(),
            nn.MaxPool2d(3, 2),
            nn.Conv2d(48, 64, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, channels, kernel_size=3, padding=1),
            nn.ReLU(),
        )
        _kaiming(self)

    @staticmethod
    def pool(x):
        return x

    def forward_pooled(self, x):
        return self.features((x - INPUT_MEAN) / INPUT_STD)

    def forward(self, x):
        return self.forward_pooled(x)


class _BasicBlock(nn.Module):
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
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.down is None else self.down(x)))


class ResNetLike(nn.Module):
    """Reduced-width ResNet layout: 224x224 -> C x 7 x 7."""

    def __init__(self, channels):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(1, 16, 7, 2, 3, bias=False), nn.BatchNorm2d(16), nn.ReLU(), nn.MaxPool2d(3, 2, 1)
        )
        self.layers = nn.Sequential(
            _BasicBlock(16, 16, 1),
            _BasicBlock(16, 32, 2),
            _BasicBlock(32, 32, 2),
            _BasicBlock(32, channels, 2),
        )

    @staticmethod
    def pool(x):
        return x

    def forward_pooled(self, x):
        return self.layers(self.stem((x - INPUT_MEAN) / INPUT_STD))

    def forward(self, x):
        return self.forward_pooled(x)


def build_backbone(config: ModelConfig) -> nn.Module:
    if config.backbone == "small-conv":
        return SmallConv(config.feature_channels, config.backbone_width)
    cls = {"alexnet-like": AlexNetLike, "resnet-like": ResNetLike}[config.backbone]
    return cls(config.feature_channels)


def to_input(images) -> torch.Tensor:
    """uint8 images (N, H, W) or (H, W) -> float tensor (N, 1, H, W) in [0, 1]."""
    a = torch.as_tensor(np.asarray(images))
    if a.dim() == 2:
        a = a[None]
    return a.to(torch.float32).div(255.0).unsqueeze(1)


def extract_features(backbone: nn.Module, image) -> torch.Tensor:
    """Eval-mode features of one 224x224 uint8 image, shape (C, h, w)."""
    arr = np.asarray(image)
    if arr.shape != (224, 224):
        raise ValueError(f"expected a 224x224 image, got shape {arr.shape}")
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        out = backbone(to_input(arr))[0]
    backbone.train(was_training)
    return out


# -- AdaIN + generator -----------------------------------------------------------


def channel_stats(h: torch.Tensor, eps: float = ADAIN_EPS):
    """Per-channel spatial mean and population std (floored at ``eps``) of (N, C, h, w)."""
    mu = h.mean(dim=(-2, -1), keepdim=True)
    # floor the variance before the root: sqrt has an infinite slope at 0
    sigma = (h - mu).pow(2).mean(dim=(-2, -1), keepdim=True).clamp_min(eps * eps).sqrt()
    return mu, sigma


def adain(h_t: torch.Tensor, h_r: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """``sigma(h_r) * (h_t - mu(h_t)) / sigma(h_t) + mu(h_r)`` per channel.

    Accepts (C, h, w) or (N, C, h, w) tensors of one shape.
    """
    if h_t.shape != h_r.shape:
        raise ValueError(f"AdaIN shape mismatch: {tuple(h_t.shape)} vs {tuple(h_r.shape)}")
    mu_t, sd_t = channel_stats(h_t, eps)
    mu_r, sd_r = channel_stats(h_r, eps)
    return sd_r * (h_t - mu_t) / sd_t + mu_r


class ResidualBlock(nn.Module):
    def __init__(self, channels, zero_init=True):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        if zero_init:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Generator(nn.Module):
    def __init__(self, channels, n_blocks=9, zero_init=True):
        super().__init__()
        self.blocks = nn.Sequential(*[ResidualBlock(channels, zero_init) for _ in range(n_blocks)])

    def forward(self, x):
        return self.blocks(x)


def generator_input(h_t, h_r, alpha, mode="adain"):
    """Mixed input fed to the residual blocks.

    ``adain``: ``(1 - alpha) h_t + alpha AdaIN(h_t, h_r)``; ``target``: ``h_t``
    alone; ``bilateral``: ``(1 - alpha) h_t + alpha h_r``.
    """
    if h_t.shape != h_r.shape:
        raise ValueError(f"shape mismatch: {tuple(h_t.shape)} vs {tuple(h_r.shape)}")
    if mode == "adain":
        return (1.0 - alpha) * h_t + alpha * adain(h_t, h_r)
    if mode == "target":
        return h_t
    if mode == "bilateral":
        return (1.0 - alpha) * h_t + alpha * h_r
    raise ValueError(f"unknown generator input mode {mode!r}")


def generate_counterfactual(generator, h_t, h_r, alpha, mode="adain"):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return generator(generator_input(h_t, h_r, alpha, mode))


# -- discriminator -------------------------------------------------------------------


class Discriminator(nn.Module):
    """Probability that a feature map is a real reference map.

    Global decision by default; ``patch=True`` returns one probability per
    output position instead.
    """

    def __init__(self, channels, depth=2, width=32, patch=False):
        super().__init__()
        layers = []
        cin = channels
        for i in range(depth):
            layers += [nn.Conv2d(cin, width, 3, stride=1 if i == 0 else 2, padding=1), nn.LeakyReLU(0.2)]
            cin = width
        self.body = nn.Sequential(*layers)
        self.patch = patch
        self.head = nn.Conv2d(width, 1, 1) if patch else nn.Linear(width, 1)
        nn.init.normal_(self.head.weight, std=1e-2)
        nn.init.zeros_(self.head.bias)

    def logits(self, h):
        z = self.body(h)
        if self.patch:
            return self.head(z)[:, 0]
        return self.head(z.mean(dim=(-2, -1)))[:, 0]

    def forward(self, h):
        return torch.sigmoid(self.logits(h))


# -- fusion classifier ---------------------------------------------------------------


class FusionClassifier(nn.Module):
    """Concatenated inputs -> 3x3 conv FusionLayer -> GAP -> 2-class linear head.

    ``in_channels`` is the total channel count of the concatenated inputs.
    """

    def __init__(self, in_channels, width=32):
        super().__init__()
        self.fusion = nn.Conv2d(in_channels, width, 3, padding=1)
        self.head = nn.Linear(width, 2)

    def fused(self, *inputs):
        return F.relu(self.fusion(torch.cat(inputs, dim=1)))

    def forward(self, *inputs):
        """Returns ``(logits (N, 2), fused feature map (N, width, h, w))``."""
        a = self.fused(*inputs)
        return self.head(a.mean(dim=(-2, -1))), a

    def class_cams(self, fused_map):
        """CAM per class, (N, 2, h, w): class-weighted sum of fused channels."""
        return torch.einsum("kc,nchw->nkhw", self.head.weight, fused_map)


def classify(classifier: FusionClassifier, residual, h_t):
    """``(p_malignant (N,), malignant CAM (N, h, w), logits)`` for ``[residual, h_t]``."""
    if residual.shape != h_t.shape:
        raise ValueError("residual and target features must share one shape")
    logits, fused = classifier(residual, h_t)
    p = torch.softmax(logits, dim=1)[:, 1]
    cam = classifier.class_cams(fused)[:, 1]
    return p, cam, logits


# -- the assembled model -----------------------------------------------------------------


class CGN(nn.Module):
    """Extractor, generator and fusion classifier; the discriminator is kept apart.

    ``fusion_inputs`` selects what the classifier sees: ``residual`` for
    ``[H_T - H_C, H_T]``, ``bilateral`` for ``[H_T, H_R]`` (simple bilateral
    features) and ``single`` for ``H_T`` alone (vanilla).
    """

    def __init__(self, config: ModelConfig, fusion_inputs="residual"):
        super().__init__()
        self.config = config
        self.fusion_inputs = fusion_inputs
        c = config.feature_channels
        self.extractor = build_backbone(config)
        self.generator = Generator(c, config.generator_blocks, config.zero_init_residual) if fusion_inputs == "residual" else None
        n_in = c if fusion_inputs == "single" else 2 * c
        self.classifier = FusionClassifier(n_in, config.fusion_channels)

    def features(self, pooled):
        return self.extractor.forward_pooled(pooled)

    def classify_from(self, h_t, h_c=None, h_r=None):
        """Logits and fused map for the configured fusion inputs."""
        if self.fusion_inputs == "residual":
            return self.classifier(h_t - h_c, h_t)
        if self.fusion_inputs == "bilateral":
            return self.classifier(h_t, h_r)
        return self.classifier(h_t)


def build_discriminator(config: ModelConfig) -> Discriminator:
    return Discriminator(config.feature_channels, config.discriminator_depth, patch=config.discriminator_patch)
