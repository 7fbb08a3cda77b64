"""Quantized-DCT-coefficient model of grayscale JPEG images.

Coefficients are stored in the usual "flat" layout: an ``(H, W)`` integer
array where the coefficient of mode ``(k, l)`` in block ``(a, b)`` sits at
``(8*a + k, 8*b + l)`` (all indices zero-based).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

# IJG / Annex K luminance table, natural (row-major) order.
BASE_LUMINANCE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)

LEVEL_SHIFT = 128.0
JCOEF_MAGIC = b"JCF1"


@dataclass(frozen=True, eq=False)
class QuantTable:
    """8x8 grid of quantization steps, indexed ``steps[k, l]``."""

    steps: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps)
        if steps.shape != (8, 8):
            raise ValueError(f"quantization table must be 8x8, got {steps.shape}")
        if not np.all(np.equal(np.mod(steps, 1), 0)):
            raise ValueError("quantization steps must be integers")
        steps = steps.astype(np.int64)
        if steps.min() < 1:
            raise ValueError("quantization steps must be >= 1")
        steps.setflags(write=False)
        object.__setattr__(self, "steps", steps)

    def __eq__(self, other):
        return isinstance(other, QuantTable) and np.array_equal(self.steps, other.steps)

    def tiled(self, height: int, width: int) -> np.ndarray:
        """Steps broadcast over a flat ``(height, width)`` coefficient plane."""
        return np.tile(self.steps, (height // 8, width // 8))


@dataclass(frozen=True, eq=False)
class JpegImage:
    """Quantized DCT coefficients of a grayscale JPEG plus its table."""

    coefficients: np.ndarray
    table: QuantTable

    def __post_init__(self):
        coef = np.asarray(self.coefficients)
        if coef.ndim != 2:
            raise ValueError("coefficient plane must be 2-D")
        h, w = coef.shape
        if h == 0 or w == 0 or h % 8 or w % 8:
            raise ValueError(f"image dimensions must be positive multiples of 8, got {h}x{w}")
        if not np.issubdtype(coef.dtype, np.integer):
            if not np.all(np.equal(np.mod(coef, 1), 0)):
                raise ValueError("coefficients must be integers")
        coef = coef.astype(np.int32)
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)

    def __eq__(self, other):
        return (
            isinstance(other, JpegImage)
            and self.table == other.table
            and np.array_equal(self.coefficients, other.coefficients)
        )

    @property
    def height(self) -> int:
        return self.coefficients.shape[0]

    @property
    def width(self) -> int:
        return self.coefficients.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.coefficients.shape

    def with_coefficients(self, coefficients: np.ndarray) -> "JpegImage":
        return JpegImage(coefficients, self.table)

    def dequantized(self) -> np.ndarray:
        return self.coefficients * self.table.tiled(self.height, self.width).astype(np.float64)


def to_blocks(plane: np.ndarray) -> np.ndarray:
    """``(H, W, ...)`` flat plane -> ``(H/8, W/8, 8, 8, ...)`` block view (a copy)."""
    h, w = plane.shape[:2]
    rest = plane.shape[2:]
    blocks = plane.reshape(h // 8, 8, w // 8, 8, *rest)
    return np.ascontiguousarray(np.swapaxes(blocks, 1, 2))


def from_blocks(blocks: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_blocks`."""
    a, b = blocks.shape[:2]
    rest = blocks.shape[4:]
    return np.ascontiguousarray(np.swapaxes(blocks, 1, 2)).reshape(8 * a, 8 * b, *rest)


def flat_index(a: int, b: int, k: int, l: int) -> tuple[int, int]:
    """Block ``(a, b)`` / mode ``(k, l)`` -> flat position (zero-based)."""
    return 8 * a + k, 8 * b + l


def block_index(i: int, j: int) -> tuple[int, int, int, int]:
    return i // 8, j // 8, i % 8, j % 8


@lru_cache(maxsize=None)
def _dct_basis(n: int) -> np.ndarray:
    idx = np.arange(n)
    weight = np.where(idx == 0, 1.0, np.sqrt(2.0))
    cos = np.cos(np.pi * np.outer(idx, 2 * idx + 1) / (2 * n))  # [u, i]
    bank = (
        (weight[:, None, None, None] * weight[None, :, None, None] / n)
        * cos[:, None, :, None]
        * cos[None, :, None, :]
    )
    bank.setflags(write=False)
    return bank


def build_dct_basis(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II basis bank, shape ``(n, n, n, n)`` indexed ``[u, v, i, j]``.

    ``Z[u, v, i, j] = w_u w_v / n * cos(pi u (2i+1) / 2n) cos(pi v (2j+1) / 2n)``
    with ``w_0 = 1`` and ``w_k = sqrt(2)``.
    """
    return _dct_basis(n)


def idct_blocks(dequantized_blocks: np.ndarray) -> np.ndarray:
    return np.einsum("abkl,klij->abij", dequantized_blocks, build_dct_basis(), optimize=True)


def dct_blocks(pixel_blocks: np.ndarray) -> np.ndarray:
    return np.einsum("abij,klij->abkl", pixel_blocks, build_dct_basis(), optimize=True)


def decompress(image: JpegImage, level_shift: bool = True) -> np.ndarray:
    """Dequantize and inverse-transform to a float pixel plane.

    No rounding and no clamping, so the map from coefficients to pixels is
    affine.
    """
    pixels = from_blocks(idct_blocks(to_blocks(image.dequantized())))
    if level_shift:
        pixels += LEVEL_SHIFT
    return pixels


def forward_dct(pixels: np.ndarray, level_shift: bool = True) -> np.ndarray:
    """Blockwise orthonormal DCT of a pixel plane (dequantized coefficient domain)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if level_shift:
        pixels = pixels - LEVEL_SHIFT
    return from_blocks(dct_blocks(to_blocks(pixels)))


def extract_coefficients(pixels: np.ndarray, table: QuantTable, level_shift: bool = True) -> np.ndarray:
    """Real-valued (unrounded) coefficients: forward DCT divided by the steps."""
    h, w = pixels.shape
    return forward_dct(pixels, level_shift) / table.tiled(h, w)


def compress(pixels: np.ndarray, table: QuantTable) -> JpegImage:
    """Forward DCT + rounding quantization; the usual JPEG lossy step."""
    return JpegImage(np.rint(extract_coefficients(pixels, table)).astype(np.int32), table)


def quality_to_quant_table(qf: int) -> QuantTable:
    """IJG quality scaling of the standard luminance table."""
    if isinstance(qf, bool) or int(qf) != qf or not 1 <= qf <= 100:
        raise ValueError(f"quality factor must be an integer in [1, 100], got {qf!r}")
    qf = int(qf)
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    return QuantTable(np.clip((BASE_LUMINANCE * scale + 50) // 100, 1, 255))


def count_nzac(image: JpegImage) -> int:
    """Number of nonzero AC coefficients."""
    nonzero = image.coefficients != 0
    nonzero[::8, ::8] = False
    return int(nonzero.sum())


def jcoef_bytes(image: JpegImage) -> bytes:
    coef = image.coefficients
    if coef.min(initial=0) < -32768 or coef.max(initial=0) > 32767:
        raise ValueError("coefficient outside int16 range")
    if image.table.steps.max() > 65535:
        raise ValueError("quantization step outside u16 range")
    return b"".join(
        [
            JCOEF_MAGIC,
            struct.pack("<II", image.height, image.width),
            image.table.steps.astype("<u2").tobytes(),
            coef.astype("<i2").tobytes(),
        ]
    )


def jcoef_from_bytes(data: bytes) -> JpegImage:
    if data[:4] != JCOEF_MAGIC:
        raise ValueError("not a .jcoef container (bad magic)")
    if len(data) < 12 + 128:
        raise ValueError("truncated .jcoef container")
    h, w = struct.unpack_from("<II", data, 4)
    expected = 12 + 128 + 2 * h * w
    if len(data) != expected:
        raise ValueError(f".jcoef size mismatch: expected {expected} bytes, got {len(data)}")
    steps = np.frombuffer(data, dtype="<u2", count=64, offset=12).reshape(8, 8)
    coef = np.frombuffer(data, dtype="<i2", count=h * w, offset=140).reshape(h, w)
    return JpegImage(coef.astype(np.int32), QuantTable(steps.astype(np.int64)))


def save_jcoef(path, image: JpegImage) -> None:
    Path(path).write_bytes(jcoef_bytes(image))


def load_jcoef(path) -> JpegImage:
    return jcoef_from_bytes(Path(path).read_bytes())
