"""Generator, patch discriminator and pluggable restorers."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imagecore import BlurKernel

_EPS = 1e-4


def param_hash(module: nn.Module) -> str:
    """SHA-256 over parameter and buffer bytes, in state_dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """ResNet generator conditioned on a degradation prompt.

    The clean image and the prompt are concatenated along channels. The
    network predicts a residual in logit space, so the output stays in
    (0, 1). With ``prompt_skip`` the residual is applied on top of
    ``x + gain * prompt`` (``gain`` learnable, starting at 1) instead of
    ``x``; otherwise a zero residual reproduces the clean input.
    """

    def __init__(self, channels: int = 3, base_channels: int = 32, residual_blocks: int = 6,
                 prompt_skip: bool = True):
        super().__init__()
        self.channels = channels
        self.prompt_gain = nn.Parameter(torch.ones(1)) if prompt_skip else None
        self.head = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(2 * channels, base_channels, 3),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(base_channels) for _ in range(residual_blocks)])
        self.tail = nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(base_channels, channels, 3))

    def forward(self, x, prompt):
        if x.shape != prompt.shape:
            raise ValueError(f"clean {tuple(x.shape)} and prompt {tuple(prompt.shape)} differ")
        r = self.tail(self.blocks(self.head(torch.cat([x, prompt], dim=1))))
        start = x + self.prompt_gain * prompt if self.prompt_gain is not None else x
        base = torch.logit(start.clamp(_EPS, 1 - _EPS))
        return torch.sigmoid(base + r)


def generate(g: Generator, x, d):
    return g(x, d)


def generator_param_count(channels: int, base: int, blocks: int, prompt_skip: bool = True) -> int:
    """Closed-form parameter count of ``Generator``."""
    head = 2 * channels * base * 9 + base
    block = 2 * (base * base * 9 + base)
    tail = base * channels * 9 + channels
    return head + blocks * block + tail + int(prompt_skip)


class Discriminator(nn.Module):
    """Patch discriminator with ``n_layers`` stride-2 convolutions.

    Without normalization layers, so shifting the input by the total stride
    shifts interior scores by exactly one cell. Inputs in [0, 1] are mapped
    to [-1, 1] first; uncentered inputs make noise much slower to detect.
    """

    kernel = 4

    def __init__(self, channels: int = 3, base_channels: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(channels, base_channels, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        ch = base_channels
        for i in range(1, n_layers):
            nxt = base_channels * min(2**i, 8)
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1), nn.LeakyReLU(0.2, True)]
            ch = nxt
        nxt = base_channels * min(2**n_layers, 8)
        layers += [nn.Conv2d(ch, nxt, 4, 1, 1), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(nxt, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)
        self.n_layers = n_layers

    @property
    def stride(self) -> int:
        return 2**self.n_layers

    @property
    def receptive_field(self) -> int:
        rf = 1
        for s in reversed([2] * self.n_layers + [1, 1]):
            rf = rf * s + (self.kernel - s)
        return rf

    def forward(self, img):
        h, w = img.shape[-2:]
        if min(h, w) < self.receptive_field:
            raise ValueError(f"input {h}x{w} smaller than receptive field {self.receptive_field}")
        return self.net(2 * img - 1)


def discriminate(dnet: Discriminator, img):
    return dnet(img)


# ---------------------------------------------------------------------------
# Restorers


@dataclass(frozen=True)
class RestorerConfig:
    backbone: str = "tiny_cnn"
    depth: int = 4
    width: int = 32


class Restorer(nn.Module):
    """Residual restorer ``y + f(y)`` clamped to [0, 1].

    The last layer starts at zero, so a fresh restorer is the identity.
    """

    backbone = "base"

    def body(self, y):
        raise NotImplementedError

    def forward(self, y):
        return (y + self.body(y)).clamp(0.0, 1.0)


def _zero(conv):
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class TinyCNN(Restorer):
    backbone = "tiny_cnn"

    def __init__(self, channels=3, depth=4, width=32):
        super().__init__()
        layers = [nn.Conv2d(channels, width, 3, padding=1, padding_mode="reflect"), nn.ReLU(True)]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1, padding_mode="reflect"), nn.ReLU(True)]
        layers.append(_zero(nn.Conv2d(width, channels, 3, padding=1, padding_mode="reflect")))
        self.net = nn.Sequential(*layers)

    def body(self, y):
        return self.net(y)


class DnCNNLike(Restorer):
    """DnCNN-style stack with group norm; predicts the negated residual."""

    backbone = "dncnn_like"

    def __init__(self, channels=3, depth=8, width=32):
        super().__init__()
        layers = [nn.Conv2d(channels, width, 3, padding=1), nn.ReLU(True)]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1, bias=False),
                       nn.GroupNorm(4, width), nn.ReLU(True)]
        layers.append(_zero(nn.Conv2d(width, channels, 3, padding=1)))
        self.net = nn.Sequential(*layers)

    def body(self, y):
        return -self.net(y)


class UNetLike(Restorer):
    """Two-scale U-Net. Odd sizes are handled by padding to even."""

    backbone = "unet_like"

    def __init__(self, channels=3, depth=2, width=32):
        super().__init__()
        n = max(depth, 1)

        def block(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(True),
                                 nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(True))

        self.levels = n
        self.enc = nn.ModuleList()
        ch = channels
        for i in range(n):
            self.enc.append(block(ch, width * 2**i))
            ch = width * 2**i
        self.mid = block(ch, ch * 2)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        ch2 = ch * 2
        for i in reversed(range(n)):
            cw = width * 2**i
            self.up.append(nn.ConvTranspose2d(ch2, cw, 2, stride=2))
            self.dec.append(block(2 * cw, cw))
            ch2 = cw
        self.out = _zero(nn.Conv2d(width, channels, 1))

    def body(self, y):
        h, w = y.shape[-2:]
        m = 2**self.levels
        ph, pw = (-h) % m, (-w) % m
        x = F.pad(y, (0, pw, 0, ph), mode="replicate") if ph or pw else y
        skips = []
        for enc in self.enc:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.mid(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.out(x)[..., :h, :w]


class GaussianConvRestorer(Restorer):
    """Single depthwise convolution initialized to Gaussian-blur weights.

    Used as the stage-0 restorer inside the prompt module. The residual
    form is dropped: the output is the blurred image itself.
    """

    backbone = "gaussian_conv"

    def __init__(self, channels=3, kernel_size=5, learnable=True):
        super().__init__()
        k = BlurKernel(kernel_size)
        self.pad = kernel_size // 2
        self.channels = channels
        w = k.weights.float().expand(channels, 1, kernel_size, kernel_size).clone()
        self.weight = nn.Parameter(w, requires_grad=learnable)
        self.learnable = learnable

    def forward(self, y):
        x = F.pad(y, (self.pad,) * 4, mode="reflect")
        return F.conv2d(x, self.weight.to(y.dtype), groups=self.channels).clamp(0.0, 1.0)


BACKBONES = {cls.backbone: cls for cls in (TinyCNN, DnCNNLike, UNetLike)}


def build_restorer(cfg: RestorerConfig, channels: int = 3) -> Restorer:
    if cfg.backbone not in BACKBONES:
        raise ValueError(f"unknown restorer backbone {cfg.backbone!r}; choose from {sorted(BACKBONES)}")
    return BACKBONES[cfg.backbone](channels=channels, depth=cfg.depth, width=cfg.width)


class RestorerSnapshot:
    """Frozen, gradient-exempt copy of a restorer.

    Gradients may still flow to the *input* of a snapshot forward pass, but
    never to its parameters.
    """

    def __init__(self, source: nn.Module):
        if isinstance(source, RestorerSnapshot):
            raise TypeError("snapshots are terminal and cannot be snapshotted again")
        self.module = copy.deepcopy(source)
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.backbone = getattr(source, "backbone", type(source).__name__)
        self.param_hash = param_hash(self.module)

    def __call__(self, y):
        return self.module(y)

    def parameters(self):
        return self.module.parameters()

    def state_dict(self):
        return self.module.state_dict()

    def current_hash(self) -> str:
        return param_hash(self.module)


def snapshot(r) -> RestorerSnapshot:
    return RestorerSnapshot(r)


def restore(r, y):
    return r(y)
