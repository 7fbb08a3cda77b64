"""Environment network: fixed residual bank, truncation, wide XuNet-style backbone.

The network maps a centered pixel plane ``(N, 1, H, W)`` to a softmax pair
``(p_cover, p_stego)``. Its loss gradient with respect to the stego pixels,
pulled back through decompression, is what the policy is rewarded with.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .jpeg_model import build_dct_basis, dct_blocks, from_blocks, to_blocks
from .nn_core import TLU, batchnorm, init_weights

FILTER_BANKS = ("dct8", "dct4", "srm30", "learnable")
BASE_WIDTHS = (48, 48, 64, 128, 256)
NARROW_WIDTHS = (8, 16, 32, 64, 128)
XUNET_KERNELS = (5, 5, 1, 1, 1)


def _rotations(kernel: np.ndarray, count: int) -> list[np.ndarray]:
    return [np.rot90(kernel, r) for r in range(count)]


def srm_filters() -> np.ndarray:
    """The 30 normalized SRM high-pass kernels, each embedded in a 5x5 frame, ``(30, 5, 5)``."""
    out = []

    def framed(k):
        f = np.zeros((5, 5))
        r = (5 - k.shape[0]) // 2
        f[r : r + k.shape[0], r : r + k.shape[1]] = k
        return f

    # First order: -1 at the center, +1 at one of the eight neighbours.
    for di, dj in [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]:
        k = np.zeros((3, 3))
        k[1, 1], k[1 + di, 1 + dj] = -1.0, 1.0
        out.append(framed(k))
    # Second order: 1 -2 1 along four orientations.
    line = np.zeros((3, 3))
    line[1] = [1.0, -2.0, 1.0]
    diag = np.diag([1.0, -2.0, 1.0])
    for k in (line, line.T, diag, np.fliplr(diag)):
        out.append(framed(k) / 2.0)
    # Third order: 1 -3 3 -1 along eight directions.
    for di, dj in [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]:
        k = np.zeros((5, 5))
        k[2 - di, 2 - dj], k[2, 2], k[2 + di, 2 + dj], k[2 + 2 * di, 2 + 2 * dj] = 1.0, -3.0, 3.0, -1.0
        out.append(k / 3.0)
    sq3 = np.array([[-1.0, 2, -1], [2, -4, 2], [-1, 2, -1]])
    sq5 = np.array(
        [[-1.0, 2, -2, 2, -1], [2, -6, 8, -6, 2], [-2, 8, -12, 8, -2], [2, -6, 8, -6, 2], [-1, 2, -2, 2, -1]]
    )
    out.append(framed(sq3) / 4.0)
    out.append(sq5 / 12.0)
    edge3 = sq3.copy()
    edge3[2] = 0.0
    edge5 = sq5.copy()
    edge5[3:] = 0.0
    out.extend(framed(k) / 4.0 for k in _rotations(edge3, 4))
    out.extend(k / 12.0 for k in _rotations(edge5, 4))
    return np.stack(out)


def filter_bank(name: str) -> np.ndarray:
    """Filters of a fixed bank as ``(C, k, k)``."""
    if name == "dct8":
        return build_dct_basis(8).reshape(64, 8, 8)
    if name == "dct4":
        return build_dct_basis(4).reshape(16, 4, 4)
    if name == "srm30":
        return srm_filters()
    raise ValueError(f"no fixed filters for bank {name!r}")


def same_pad(kernel: int) -> tuple[int, int]:
    """Zero padding (before, after) giving a stride-1 output the size of the input."""
    return (kernel - 1) // 2, kernel // 2


class Preprocess(nn.Module):
    """Stride-1 same-padded correlation with a filter bank, then truncation.

    Fixed banks are held as float64 constants outside the parameter list and
    cast to the input dtype on use, so they never train and lose no precision.
    """

    def __init__(self, bank: str = "dct8", threshold: float = 8.0, learnable_channels: int = 64, learnable_kernel: int = 8):
        super().__init__()
        if bank not in FILTER_BANKS:
            raise ValueError(f"filter bank must be one of {FILTER_BANKS}")
        self.bank = bank
        if bank == "learnable":
            self.conv = nn.Conv2d(1, learnable_channels, learnable_kernel, bias=False)
            self.filters = None
            self.kernel = learnable_kernel
        else:
            self.conv = None
            self.filters = np.array(filter_bank(bank))
            self.kernel = self.filters.shape[-1]
        self.tlu = TLU(threshold)
        self._cast: dict = {}

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels if self.conv is not None else len(self.filters)

    def weight(self, dtype=torch.float32) -> torch.Tensor:
        if self.conv is not None:
            return self.conv.weight
        if dtype not in self._cast:
            self._cast[dtype] = torch.from_numpy(self.filters[:, None].copy()).to(dtype)
        return self._cast[dtype]

    def residuals(self, x):
        lo, hi = same_pad(self.kernel)
        return F.conv2d(F.pad(x, (lo, hi, lo, hi)), self.weight(x.dtype))

    def forward(self, x):
        return self.tlu(self.residuals(x))


@dataclass
class EnvNetConfig:
    filter_bank: str = "dct8"
    threshold: float = 8.0
    widths: tuple[int, ...] = BASE_WIDTHS
    kernels: tuple[int, ...] | None = None
    xi: float = 1e7
    bn_momentum: float = 0.999

    def __post_init__(self):
        if self.filter_bank not in FILTER_BANKS:
            raise ValueError(f"filter_bank must be one of {FILTER_BANKS}")
        if not self.threshold > 0:
            raise ValueError("truncation threshold must be positive")
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be a nonempty list of positive ints")
        if self.kernels is None:
            k = XUNET_KERNELS
            self.kernels = k if len(self.widths) == len(k) else (5, 5) + (3,) * (len(self.widths) - 2)
        self.kernels = tuple(int(k) for k in self.kernels)
        if len(self.kernels) != len(self.widths):
            raise ValueError("kernels and widths must have the same length")

    @classmethod
    def preset(cls, variant: str = "base", **overrides) -> "EnvNetConfig":
        """Named ablation presets; ``V`` is a deep stack and ``VI`` the narrow widths."""
        table = {
            "base": {},
            "II": {"filter_bank": "dct4"},
            "III": {"filter_bank": "srm30"},
            "IV": {"filter_bank": "learnable"},
            "V": {"widths": (16,) * 4 + (32,) * 6 + (64,) * 6 + (128,) * 6, "kernels": (3,) * 22},
            "VI": {"widths": NARROW_WIDTHS},
        }
        if variant not in table:
            raise ValueError(f"unknown environment variant {variant!r}")
        return cls(**{**table[variant], **overrides})


class EnvNet(nn.Module):
    def __init__(self, config: EnvNetConfig | None = None):
        super().__init__()
        self.config = config = config or EnvNetConfig()
        self.preprocess = Preprocess(config.filter_bank, config.threshold)
        groups, prev = [], self.preprocess.out_channels
        n = len(config.widths)
        # Pool after a group whenever doing so keeps the pooling count at four.
        pool_after = {round((i + 1) * n / 5) - 1 for i in range(4)}
        for i, (w, k) in enumerate(zip(config.widths, config.kernels)):
            layers = [nn.Conv2d(prev, w, k, 1, k // 2, bias=False), batchnorm(w, config.bn_momentum), nn.ReLU()]
            if i in pool_after and i < n - 1:
                layers.append(nn.AvgPool2d(5, 2, 2, count_include_pad=True))
            groups.append(nn.Sequential(*layers))
            prev = w
        self.groups = nn.Sequential(*groups)
        self.fc = nn.Linear(prev, 2)
        init_weights(self)
        # A small classifier head keeps an untrained network near chance.
        nn.init.normal_(self.fc.weight, std=0.01)

    def logits(self, x):
        h = self.groups(self.preprocess(x))
        return self.fc(h.mean(dim=(2, 3)))

    def forward(self, x):
        return F.softmax(self.logits(x), dim=1)


def env_forward(net: EnvNet, cover: torch.Tensor, stego: torch.Tensor):
    """Softmax outputs for a cover batch and a stego batch, evaluated together."""
    if cover.shape != stego.shape:
        raise ValueError(f"cover {tuple(cover.shape)} and stego {tuple(stego.shape)} differ in shape")
    z = net(torch.cat([cover, stego]))
    return z[: len(cover)], z[len(cover) :]


def cross_entropy(z, labels):
    """``-sum labels * log z`` for probabilities ``z``."""
    z, labels = torch.as_tensor(z, dtype=torch.float64), torch.as_tensor(labels, dtype=torch.float64)
    return -(labels * torch.log(z)).sum()


def env_loss(z_cover: torch.Tensor, z_stego: torch.Tensor) -> torch.Tensor:
    """Per-pair loss ``-log z_c[cover] - log z_s[stego]``, averaged over pairs."""
    return (-torch.log(z_cover[:, 0]) - torch.log(z_stego[:, 1])).mean()


def env_loss_logits(logits: torch.Tensor, n_cover: int) -> torch.Tensor:
    """:func:`env_loss` from raw logits of ``cat(cover, stego)``, numerically stable."""
    logp = F.log_softmax(logits, dim=1)
    return (-logp[:n_cover, 0] - logp[n_cover:, 1]).mean()


def dct_adjoint(pixel_grad: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Pull a pixel-plane gradient back to the quantized-coefficient grid.

    ``g[a,b,k,l] = s[k,l] * <G block (a,b), Z^{k,l}>``; works on ``(..., H, W)``.
    """
    pixel_grad = np.asarray(pixel_grad, dtype=np.float64)
    if pixel_grad.ndim > 2:
        return np.stack([dct_adjoint(g, steps) for g in pixel_grad])
    blocks = dct_blocks(to_blocks(pixel_grad))
    return from_blocks(blocks * np.asarray(steps, dtype=np.float64))


def gradient_map(pixel_grad, steps) -> np.ndarray:
    """Environment-loss gradient with respect to each coefficient modification.

    ``pixel_grad`` is the loss gradient at the stego pixel plane (a tensor
    from a finished backward pass or an array); ``None`` means no backward
    pass has happened yet.
    """
    if pixel_grad is None:
        raise RuntimeError("gradient_map needs a backward pass on the stego input first")
    if isinstance(pixel_grad, torch.Tensor):
        pixel_grad = pixel_grad.detach().double().numpy()
    if pixel_grad.ndim == 4:
        pixel_grad = pixel_grad[:, 0]
    g = dct_adjoint(pixel_grad, steps)
    if not np.isfinite(g).all():
        raise FloatingPointError("non-finite gradient map")
    return g


def reward_map(actions, grads, xi: float) -> np.ndarray:
    """``r = xi * sign(m) * g``."""
    actions, grads = np.asarray(actions), np.asarray(grads, dtype=np.float64)
    if actions.shape != grads.shape:
        raise ValueError("actions and gradients must be aligned")
    return xi * np.sign(actions).astype(np.float64) * grads


def env_accuracy(logits: torch.Tensor, n_cover: int) -> float:
    pred = logits.argmax(1)
    correct = (pred[:n_cover] == 0).sum() + (pred[n_cover:] == 1).sum()
    return float(correct) / len(logits)
