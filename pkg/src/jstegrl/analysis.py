"""Gradient-propagation analysis of residual filter banks, detection error and map output.

The accumulated gradient of filter ``f`` at mode ``(k, l)`` is
``e[k,l] = sum_blocks sum_positions |d residual / d m[k,l]|`` through the
linear chain coefficient -> (dequantize) -> IDCT -> stride-1 correlation.
That derivative depends only on the relative offset between an output
position and the block, so ``e`` reduces to a weighted sum of ``|G|``,
where ``G`` is the full correlation of the basis function with the filter
and the weights count the positions that take part at each offset.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy import signal

from .env_net import filter_bank, same_pad
from .jpeg_model import JpegImage, build_dct_basis, dct_blocks, decompress

MODES = 64


def _filters(bank) -> np.ndarray:
    if isinstance(bank, str):
        return filter_bank(bank)
    bank = np.asarray(bank, dtype=np.float64)
    return bank[None] if bank.ndim == 2 else bank


def mode_responses(filters: np.ndarray) -> np.ndarray:
    """``|G|`` for every filter and mode: ``(C, 8, 8, K+7, K+7)``."""
    basis = build_dct_basis(8)
    k = filters.shape[-1]
    out = np.empty((len(filters), 8, 8, k + 7, k + 7))
    for c, f in enumerate(filters):
        for u in range(8):
            for v in range(8):
                out[c, u, v] = np.abs(signal.correlate(basis[u, v], f, mode="full"))
    return out


def offset_weights(mask: np.ndarray, kernel: int) -> np.ndarray:
    """``W[r, c]``: number of counted output positions at block offset ``(r, c)``.

    ``mask`` is an ``(H, W)`` 0/1 grid of output positions that count.
    """
    lo, _ = same_pad(kernel)
    h, w = mask.shape
    before = kernel - 1 - lo
    padded = np.zeros((h + before + kernel + 8, w + before + kernel + 8))
    padded[before : before + h, before : before + w] = mask
    span = kernel + 7
    out = np.empty((span, span))
    a, b = h // 8, w // 8
    for r in range(span):
        rows = padded[r : r + 8 * a : 8]
        for c in range(span):
            out[r, c] = rows[:, c : c + 8 * b : 8].sum()
    return out


def accum_grad_matrix(
    image,
    bank="dct8",
    dequantize: bool = False,
    truncation: bool = False,
    threshold: float = 8.0,
    stride: int = 1,
    responses: np.ndarray | None = None,
) -> np.ndarray:
    """Accumulated gradient component matrices ``(C, 8, 8)`` for one image.

    ``image`` is a :class:`JpegImage` or just an ``(H, W)`` shape. With
    ``dequantize`` the chain includes the quantization steps; with
    ``truncation`` positions whose residual magnitude reaches ``threshold``
    pass no gradient. ``stride`` keeps only output positions on that grid
    (``stride=8`` gives block-aligned residuals). ``responses`` may carry a
    precomputed :func:`mode_responses` of the bank.
    """
    filters = _filters(bank)
    shape = image.shape if isinstance(image, JpegImage) else tuple(image)
    if truncation and not isinstance(image, JpegImage):
        raise ValueError("the truncation-aware variant needs an actual image")
    k = filters.shape[-1]
    if responses is None:
        responses = mode_responses(filters)
    lo, _ = same_pad(k)
    grid = np.zeros(shape)
    grid[(np.arange(shape[0]) - lo) % stride == 0] += 1
    grid *= ((np.arange(shape[1]) - lo) % stride == 0)[None]
    if truncation:
        lo, hi = same_pad(k)
        pixels = np.pad(decompress(image, level_shift=False), ((lo, hi), (lo, hi)))
        res = np.stack([signal.correlate(pixels, f, mode="valid") for f in filters])
        masks = (np.abs(res) < threshold) * grid
        weights = np.stack([offset_weights(m, k) for m in masks])
    else:
        weights = np.broadcast_to(offset_weights(grid, k), (len(filters), k + 7, k + 7))
    e = np.einsum("cuvrs,crs->cuv", responses, weights)
    if dequantize:
        if not isinstance(image, JpegImage):
            raise ValueError("dequantize needs an image with a quantization table")
        e = e * image.table.steps
    return e


def accum_grad_average(images, bank="dct8", **kwargs) -> np.ndarray:
    """Mean of :func:`accum_grad_matrix` over an image set."""
    total = None
    responses = mode_responses(_filters(bank))
    for im in images:
        e = accum_grad_matrix(im, bank, responses=responses, **kwargs)
        total = e if total is None else total + e
    if total is None:
        raise ValueError("empty image set")
    return total / len(images)


def normalize(matrices: np.ndarray) -> np.ndarray:
    """Per-matrix min-max scaling to [0, 1]; constant matrices map to 0."""
    m = np.asarray(matrices, dtype=np.float64)
    flat = m.reshape(m.shape[0], -1) if m.ndim == 3 else m.reshape(1, -1)
    lo = flat.min(1, keepdims=True)
    span = flat.max(1, keepdims=True) - lo
    out = np.where(span > 0, (flat - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out.reshape(m.shape)


def mode_orders(matrices: np.ndarray) -> np.ndarray:
    """Rank 1..64 of every mode within each matrix, descending, ties by mode index."""
    flat = np.asarray(matrices, dtype=np.float64).reshape(-1, MODES)
    order = np.argsort(-flat, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(flat.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, MODES + 1)[None]
    return ranks.reshape(-1, 8, 8)


def top_n_stats(matrices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-n rates ``r`` of shape ``(65, 8, 8)`` and statistics ``s`` of shape ``(65,)``."""
    matrices = np.asarray(matrices, dtype=np.float64)
    if matrices.ndim == 2:
        matrices = matrices[None]
    if matrices.shape[0] == 0:
        raise ValueError("need at least one matrix")
    orders = mode_orders(matrices)
    n = np.arange(MODES + 1)[:, None, None, None]
    rates = (orders[None] <= n).sum(axis=1)
    stats = (rates > 0).reshape(MODES + 1, -1).sum(axis=1)
    return rates, stats


def detection_error(cover_scores, stego_scores) -> float:
    """``min_t (P_FA(t) + P_MD(t)) / 2``, deciding 'stego' when score > t."""
    cover = np.sort(np.asarray(cover_scores, dtype=np.float64).ravel())
    stego = np.sort(np.asarray(stego_scores, dtype=np.float64).ravel())
    if cover.size == 0 or stego.size == 0:
        raise ValueError("detection_error needs nonempty score lists")
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([cover, stego]))])
    false_alarm = 1.0 - np.searchsorted(cover, thresholds, side="right") / cover.size
    missed = np.searchsorted(stego, thresholds, side="right") / stego.size
    return float(np.min(0.5 * (false_alarm + missed)))


def filter_spectra(bank) -> np.ndarray:
    """``|DCT|`` of each filter zero-padded (bottom/right) to 8x8, ``(C, 8, 8)``."""
    filters = _filters(bank)
    k = filters.shape[-1]
    if k > 8:
        raise ValueError("filters larger than 8x8 have no 8x8 spectrum")
    padded = np.zeros((len(filters), 8, 8))
    padded[:, :k, :k] = filters
    return np.abs(dct_blocks(padded[None]))[0]


# -- map emission ------------------------------------------------------------


def quantize_map(values, kind: str = "auto") -> np.ndarray:
    """8-bit rendering: min-max for continuous maps, {0,128,255} for modifications.

    A policy tensor ``(H, W, 3)`` is rendered through its change probability.
    """
    values = np.asarray(values)
    if values.ndim == 3 and values.shape[-1] == 3:
        values = 1.0 - values[..., 1]
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {values.shape}")
    if kind == "auto":
        kind = "modification" if values.dtype.kind in "iu" and np.isin(values, (-1, 0, 1)).all() else "continuous"
    if kind == "modification":
        if not np.isin(values, (-1, 0, 1)).all():
            raise ValueError("modification maps must lie in {-1, 0, +1}")
        return np.array([0, 128, 255], np.uint8)[values.astype(np.int64) + 1]
    values = values.astype(np.float64)
    lo, hi = values.min(), values.max()
    if not hi > lo:
        return np.full(values.shape, 128, np.uint8)
    return np.rint(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError("only 8-bit binary PGM is supported")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data, np.uint8, count=w * h, offset=pos + 1).reshape(h, w).copy()


def emit_maps(values, path, kind: str = "auto", png: bool = False) -> np.ndarray:
    """Write a map as PGM (or PNG when ``png``); returns the 8-bit image."""
    pixels = quantize_map(values, kind)
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"cannot write {path}: directory does not exist")
    if png:
        from PIL import Image

        Image.fromarray(pixels, mode="L").save(path, format="PNG")
    else:
        write_pgm(path, pixels)
    return pixels


def heatmap(matrix: np.ndarray, scale: int = 16) -> np.ndarray:
    """A normalized 8x8 matrix blown up to ``8*scale`` pixels per side."""
    return np.kron(quantize_map(normalize(matrix[None])[0]), np.ones((scale, scale), np.uint8))


def write_sn_csv(path, stats: dict[str, np.ndarray]) -> None:
    names = list(stats)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", *names])
        for n in range(MODES + 1):
            writer.writerow([n, *(int(stats[b][n]) for b in names)])
