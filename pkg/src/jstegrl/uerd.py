"""UERD embedding costs and fixed texture front ends (wavelet and block energy)."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .distortion import WET_COST
from .jpeg_model import JpegImage, QuantTable, to_blocks

# 16-tap Daubechies (db8) decomposition high-pass filter, as used by the
# J-UNIWARD directional residuals.
DB8_HIGHPASS = np.array(
    [
        -0.0544158422, 0.3128715909, -0.6756307363, 0.5853546837,
        0.0158291053, -0.2840155430, -0.0004724846, 0.1287474266,
        0.0173693010, -0.0440882539, -0.0139810279, 0.0087460940,
        0.0048703530, -0.0003917404, -0.0006754494, -0.0001174768,
    ]
)
DB8_LOWPASS = (-1.0) ** np.arange(16) * DB8_HIGHPASS[::-1]


def block_energy(image: JpegImage) -> np.ndarray:
    """``E[a, b] = sum_kl |x| * s_kl`` per 8x8 block."""
    blocks = to_blocks(np.abs(image.coefficients).astype(np.float64))
    return np.einsum("abkl,kl->ab", blocks, image.table.steps.astype(np.float64))


def neighbor_sum(energy: np.ndarray) -> np.ndarray:
    """Sum over the (up to) eight in-image neighbors of every block."""
    padded = np.pad(energy, 1)
    total = np.zeros_like(energy, dtype=np.float64)
    rows, cols = energy.shape
    for da in (-1, 0, 1):
        for db in (-1, 0, 1):
            if da or db:
                total += padded[1 + da : 1 + da + rows, 1 + db : 1 + db + cols]
    return total


def block_texture(energy: np.ndarray) -> np.ndarray:
    return energy + 0.25 * neighbor_sum(energy)


def block_suitability(energy: np.ndarray) -> np.ndarray:
    denom = block_texture(energy)
    with np.errstate(divide="ignore"):
        return np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), WET_COST)


def mode_suitability(table: QuantTable) -> np.ndarray:
    steps = table.steps.astype(np.float64)
    out = steps.copy()
    out[0, 0] = 0.5 * (steps[1, 0] + steps[0, 1])
    return out


def uerd_cost(image: JpegImage) -> np.ndarray:
    """Per-coefficient UERD cost, flat ``(H, W)`` layout."""
    block = block_suitability(block_energy(image))
    mode = mode_suitability(image.table)
    return np.kron(block, mode)


def wavelet_filters() -> np.ndarray:
    """The three 16x16 directional filters (LH, HL, HH), shape ``(3, 16, 16)``."""
    lo, hi = DB8_LOWPASS, DB8_HIGHPASS
    return np.stack([np.outer(lo, hi), np.outer(hi, lo), np.outer(hi, hi)])


def wavelet_texture(pixels: np.ndarray) -> np.ndarray:
    """Absolute directional wavelet residuals, ``(H, W, 3)``.

    Convolution with symmetric (half-sample) boundary extension.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    return np.stack(
        [np.abs(ndimage.convolve(pixels, k, mode="reflect")) for k in wavelet_filters()], axis=-1
    )


def msu_texture(image: JpegImage) -> np.ndarray:
    """Neighbor-weighted block energy upsampled 8x by replication, ``(H, W, 1)``."""
    t = block_texture(block_energy(image))
    return np.kron(t, np.ones((8, 8)))[..., None]
