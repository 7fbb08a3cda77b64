"""Policy network: pixel texture -> DCT features -> per-coefficient policy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import uerd
from .jpeg_model import JpegImage, count_nzac, decompress, from_blocks, to_blocks
from .nn_core import Concat, batchnorm, init_weights

TEXTURE_PROVIDERS = ("learned-unet", "wavelet-fixed", "msu-fixed", "learned-blockwise")
Q_CLAMP = 1e-6


@dataclass
class PolicyNetConfig:
    texture_provider: str = "learned-unet"
    unet_channels: tuple[int, ...] = (16, 32, 64, 128)
    feature_channels: int = 64
    feature_groups: int | None = None  # 3 for learned textures, 6 for fixed ones
    sigmoid_output: bool = True
    terminal_batchnorm: bool = False
    msu_refine_channels: int = 16
    bn_momentum: float = 0.999
    leaky_slope: float = 0.2
    level_shift: bool = True
    payload_bpnzac: float = 0.4
    alpha: float = 1.0
    beta: float = 1e-7

    def __post_init__(self):
        if self.texture_provider not in TEXTURE_PROVIDERS:
            raise ValueError(f"texture_provider must be one of {TEXTURE_PROVIDERS}")
        if not self.alpha >= 0 or not self.beta >= 0:
            raise ValueError("alpha and beta must be nonnegative")
        self.unet_channels = tuple(int(c) for c in self.unet_channels)
        if self.feature_channels != 64:
            raise ValueError("the feature volume must have exactly 64 channels")
        groups = self.groups
        if self.texture_provider != "learned-blockwise" and self.strides.count(2) != 3:
            raise ValueError(f"{groups} feature groups cannot realize an exact 8x reduction")

    @property
    def fixed_texture(self) -> bool:
        return self.texture_provider in ("wavelet-fixed", "msu-fixed")

    @property
    def groups(self) -> int:
        if self.feature_groups is not None:
            return self.feature_groups
        return 6 if self.fixed_texture else 3

    @property
    def strides(self) -> tuple[int, ...]:
        if self.texture_provider == "learned-blockwise":
            return (1,) * self.groups
        if self.groups == 3:
            return (2, 2, 2)
        # Alternating stride 1 / stride 2, odd groups first.
        return tuple(1 if i % 2 == 0 else 2 for i in range(self.groups))

    @property
    def texture_channels(self) -> int:
        return {"learned-unet": 1, "wavelet-fixed": 3, "msu-fixed": 1, "learned-blockwise": 64}[
            self.texture_provider
        ]


def conv_group(cin, cout, stride, momentum, kernel=3, activation=None):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride, kernel // 2),
        batchnorm(cout, momentum),
        activation if activation is not None else nn.ReLU(),
    )


def deconv_group(cin, cout, momentum, slope):
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 3, 2, 1, output_padding=1),
        batchnorm(cout, momentum),
        nn.LeakyReLU(slope),
    )


class UNetTexture(nn.Module):
    """Pixel-to-pixel encoder/decoder with skip concatenation; ``(N,1,H,W) -> (N,1,H,W)``."""

    def __init__(self, channels=(16, 32, 64, 128), momentum=0.999, slope=0.2):
        super().__init__()
        self.depth = len(channels)
        self.encoders = nn.ModuleList()
        prev = 1
        for c in channels:
            self.encoders.append(conv_group(prev, c, 2, momentum))
            prev = c
        self.decoders = nn.ModuleList()
        skips = list(channels[:-1])[::-1]
        for c in skips:
            self.decoders.append(deconv_group(prev, c, momentum, slope))
            prev = 2 * c
        self.head = nn.ConvTranspose2d(prev, 1, 3, 2, 1, output_padding=1)
        self.concat = Concat(dim=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        factor = 2**self.depth
        if h % factor or w % factor:
            raise ValueError(f"U-Net input must be divisible by {factor}, got {h}x{w}")
        feats = []
        for enc in self.encoders:
            x = enc(x)
            feats.append(x)
        for dec, skip in zip(self.decoders, feats[-2::-1]):
            x = self.concat(dec(x), skip)
        return self.head(x)


class BlockwiseTexture(nn.Module):
    """Block-level texture learner: ``(N,1,H,W) -> (N,64,H/8,W/8)``."""

    def __init__(self, channels=(16, 32, 64), momentum=0.999):
        super().__init__()
        layers, prev = [], 1
        for c in channels:
            layers.append(conv_group(prev, c, 2, momentum))
            prev = c
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class MsuRefine(nn.Module):
    """Three stride-1 conv layers applied to the upsampled block texture."""

    def __init__(self, width=16, momentum=0.999):
        super().__init__()
        self.body = nn.Sequential(
            conv_group(1, width, 1, momentum),
            conv_group(width, width, 1, momentum),
            nn.Conv2d(width, 1, 3, 1, 1),
        )

    def forward(self, x):
        return self.body(x)


class DctFeatures(nn.Module):
    """Stacked 3x3 conv groups mapping texture to an ``(N,64,H/8,W/8)`` volume in [0,1]."""

    def __init__(self, in_channels, strides, momentum=0.999, sigmoid=True, terminal_batchnorm=False):
        super().__init__()
        layers, prev = [], in_channels
        for i, s in enumerate(strides):
            if i < len(strides) - 1:
                layers.append(conv_group(prev, 64, s, momentum))
            else:
                tail = [nn.Conv2d(prev, 64, 3, s, 1)]
                if terminal_batchnorm:
                    tail.append(batchnorm(64, momentum))
                tail.append(nn.Sigmoid() if sigmoid else nn.Hardtanh(0.0, 1.0))
                layers.append(nn.Sequential(*tail))
            prev = 64
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


def receptive_field(strides, kernel=3) -> int:
    size, jump = 1, 1
    for s in strides:
        size += (kernel - 1) * jump
        jump *= s
    return size


class PolicyNet(nn.Module):
    def __init__(self, config: PolicyNetConfig | None = None):
        super().__init__()
        self.config = config = config or PolicyNetConfig()
        m = config.bn_momentum
        if config.texture_provider == "learned-unet":
            self.texture = UNetTexture(config.unet_channels, m, config.leaky_slope)
        elif config.texture_provider == "learned-blockwise":
            self.texture = BlockwiseTexture(momentum=m)
        elif config.texture_provider == "msu-fixed":
            self.texture = MsuRefine(config.msu_refine_channels, m)
        else:
            self.texture = nn.Identity()
        in_ch = 1 if config.texture_provider == "msu-fixed" else config.texture_channels
        self.features = DctFeatures(in_ch, config.strides, m, config.sigmoid_output, config.terminal_batchnorm)
        init_weights(self)

    def prepare(self, images: list[JpegImage]) -> torch.Tensor:
        """Network input for a batch: pixels, or the fixed provider's texture."""
        provider = self.config.texture_provider
        if provider == "msu-fixed":
            arr = np.stack([uerd.msu_texture(im)[..., 0] for im in images])[:, None]
        else:
            pixels = np.stack([decompress(im, self.config.level_shift) for im in images])
            if provider == "wavelet-fixed":
                arr = np.stack([uerd.wavelet_texture(p) for p in pixels]).transpose(0, 3, 1, 2)
            else:
                arr = pixels[:, None]
        dtype = next(self.parameters()).dtype
        return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)

    def texture_module(self, x: torch.Tensor) -> torch.Tensor:
        return self.texture(x)

    def feature_volume(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"input dimensions must be divisible by 8, got {h}x{w}")
        return self.features(self.texture(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Change probability ``q`` in flat layout, ``(N, 1, H, W)``."""
        return F.pixel_shuffle(self.feature_volume(x), 8)


def mode_rearrange(volume: np.ndarray) -> np.ndarray:
    """``(H/8, W/8, 64)`` -> ``(H, W)`` with channel ``8k + l`` feeding mode ``(k, l)``."""
    volume = np.asarray(volume)
    if volume.ndim != 3 or volume.shape[2] != 64:
        raise ValueError(f"expected an (A, B, 64) volume, got {volume.shape}")
    a, b = volume.shape[:2]
    return from_blocks(volume.reshape(a, b, 8, 8))


def phase_split(plane: np.ndarray) -> np.ndarray:
    """Inverse of :func:`mode_rearrange`: ``(H, W)`` -> ``(H/8, W/8, 64)``."""
    blocks = to_blocks(np.asarray(plane))
    return blocks.reshape(blocks.shape[0], blocks.shape[1], 64)


def policy_from_q(q):
    """``(pi(-1), pi(0), pi(+1)) = (q/2, 1-q, q/2)`` along a new last axis."""
    if isinstance(q, torch.Tensor):
        return torch.stack([q / 2, 1 - q, q / 2], dim=-1)
    q = np.asarray(q, dtype=np.float64)
    return np.stack([q / 2, 1 - q, q / 2], axis=-1)


@torch.no_grad()
def change_probabilities(net: PolicyNet, images: list[JpegImage], train: bool = False) -> np.ndarray:
    """``q`` for each image, ``(N, H, W)``; inference mode unless ``train``."""
    was = net.training
    net.train(train)
    try:
        q = net(net.prepare(images))[:, 0]
    finally:
        net.train(was)
    return q.double().numpy()


def policy_forward(net: PolicyNet, image: JpegImage) -> np.ndarray:
    """Per-coefficient policy triples ``(H, W, 3)`` for one image."""
    return policy_from_q(change_probabilities(net, [image])[0])


def entropy_bits(q: torch.Tensor) -> torch.Tensor:
    """Ternary entropy in bits summed per image over all but the batch axis."""
    qc = q.clamp(Q_CLAMP, 1 - Q_CLAMP)
    h = -(qc * torch.log2(qc / 2) + (1 - qc) * torch.log2(1 - qc))
    return h.flatten(1).sum(1)


def policy_loss(q, actions, rewards, capacity, alpha: float = 1.0, beta: float = 1e-7):
    """Reward loss, capacity loss and their weighted sum, averaged over the batch.

    ``q``: ``(N, H, W)`` (or ``(N, 1, H, W)``) change probabilities;
    ``actions``/``rewards``: matching grids; ``capacity``: per-image bits.
    Returns ``(l_A, l_R, l_C)``.
    """
    q = torch.as_tensor(q)
    if q.dim() == 4:
        q = q[:, 0]
    if q.dim() == 2:
        q = q[None]
    actions = torch.as_tensor(np.asarray(actions) if not isinstance(actions, torch.Tensor) else actions).reshape(q.shape)
    rewards = torch.as_tensor(rewards, dtype=q.dtype).reshape(q.shape)
    capacity = torch.as_tensor(capacity, dtype=q.dtype).reshape(-1)
    qc = q.clamp(Q_CLAMP, 1 - Q_CLAMP)
    log_pi = torch.where(actions == 0, torch.log(1 - qc), torch.log(qc / 2))
    if torch.any((actions != 0) & (q <= 0)) or torch.any((actions == 0) & (q >= 1)):
        raise ValueError("sampled action has zero probability")
    hw = q.shape[-1] * q.shape[-2]
    l_r = (-(rewards * log_pi).flatten(1).sum(1) / hw).mean()
    l_c = ((entropy_bits(q) - capacity) ** 2).mean()
    return alpha * l_r + beta * l_c, l_r, l_c


def payload_capacity_bits(images: list[JpegImage], bpnzac: float) -> np.ndarray:
    return np.array([bpnzac * count_nzac(im) for im in images], dtype=np.float64)


def parameter_count(module: nn.Module) -> int:
    return sum(math.prod(p.shape) for p in module.parameters())
