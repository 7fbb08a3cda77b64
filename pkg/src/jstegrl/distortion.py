"""Additive distortion, ternary embedding simulation and the payload solver.

Policy tensors are ``(..., 3)`` float arrays holding the probabilities of
the actions ``(-1, 0, +1)`` in that order.
"""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .jpeg_model import JpegImage, count_nzac

WET_COST = 1e13
LOG2_3 = math.log2(3.0)
Q_FLOOR = 1e-6
Q_CEIL = 2.0 / 3.0
JMAP_MAGIC = b"JMP1"

ACTIONS = np.array([-1, 0, 1], dtype=np.int8)


class InfeasiblePayloadError(ValueError):
    pass


class SolverError(ArithmeticError):
    pass


@dataclass(frozen=True)
class PayloadSpec:
    """Payload either in absolute bits or in bits per nonzero AC coefficient."""

    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in ("bits", "bpnzAC"):
            raise ValueError(f"payload mode must be 'bits' or 'bpnzAC', got {self.mode!r}")
        if not self.value >= 0:
            raise ValueError("payload must be nonnegative")

    @classmethod
    def parse(cls, text: str) -> "PayloadSpec":
        """Parse ``"0.4bpnzAC"`` or ``"1200bits"``."""
        m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(bpnzAC|bits)\s*", text)
        if m is None:
            raise ValueError(f"cannot parse payload {text!r}; expected '<number>bpnzAC' or '<number>bits'")
        return cls(m.group(2), float(m.group(1)))

    def resolve(self, nzac: int) -> float:
        """Target capacity in bits."""
        if self.mode == "bits":
            return float(self.value)
        return float(self.value) * nzac

    def __str__(self):
        return f"{self.value:g}{self.mode}"


def additive_distortion(cover: JpegImage, stego: JpegImage, costs: np.ndarray) -> float:
    costs = np.asarray(costs, dtype=np.float64)
    if cover.shape != stego.shape or costs.shape != cover.shape:
        raise ValueError("cover, stego and costs must share dimensions")
    m = stego.coefficients.astype(np.int64) - cover.coefficients
    if np.abs(m).max(initial=0) > 1:
        raise ValueError("modifications must lie in {-1, 0, +1}")
    return float(costs[m != 0].sum())


def change_probability(costs: np.ndarray, lam: float) -> np.ndarray:
    """``pi(+1) = pi(-1)`` for every coefficient at the given lambda."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    costs = np.asarray(costs, dtype=np.float64)
    e = np.exp(-lam * costs)
    p = e / (1.0 + 2.0 * e)
    return np.where(costs >= WET_COST / 2, 0.0, p)


def probabilities_from_costs(costs: np.ndarray, lam: float) -> np.ndarray:
    """Gibbs-form ternary policy for symmetric costs; returns ``(..., 3)``."""
    p = change_probability(costs, lam)
    return np.stack([p, 1.0 - 2.0 * p, p], axis=-1)


def _ternary_entropy(p: np.ndarray) -> float:
    """Total entropy in bits of ``(p, 1 - 2p, p)`` triples."""
    p0 = 1.0 - 2.0 * p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -2.0 * np.where(p > 0, p * np.log2(p), 0.0) - np.where(p0 > 0, p0 * np.log2(p0), 0.0)
    return float(h.sum())


def payload_entropy(policy: np.ndarray) -> float:
    """Total entropy of a policy tensor in bits, with ``0 log 0 = 0``."""
    policy = np.asarray(policy, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(policy > 0, policy * np.log2(policy), 0.0)
    return float(-terms.sum())


def solve_lambda(
    costs: np.ndarray,
    payload: PayloadSpec | float,
    nzac: int = 0,
    tol: float = 1e-4,
    max_iter: int = 200,
) -> float:
    """Find lambda such that the Gibbs policy carries exactly the payload.

    Entropy decreases monotonically in lambda, so the root is bracketed by
    doubling an upper bound starting from ``[0, 1]`` and then bisected.
    """
    costs = np.asarray(costs, dtype=np.float64)
    target = payload.resolve(nzac) if isinstance(payload, PayloadSpec) else float(payload)
    capacity = costs.size * LOG2_3
    if not 0 < target <= capacity:
        raise InfeasiblePayloadError(
            f"infeasible payload: {target:.6g} bits requested, feasible range is (0, {capacity:.6g}]"
        )

    def entropy(lam):
        return _ternary_entropy(change_probability(costs, lam))

    # Wet coefficients cap what any lambda can carry.
    dry = costs < WET_COST / 2
    if target > dry.sum() * LOG2_3 + tol:
        raise InfeasiblePayloadError(f"infeasible payload: only {dry.sum()} dry coefficients")
    if entropy(0.0) - target <= tol:
        return 0.0
    # Zero-cost coefficients stay at 1/3 change rate for every lambda.
    floor = np.count_nonzero(costs <= 0) * LOG2_3
    if floor > target + tol:
        raise InfeasiblePayloadError(
            f"infeasible payload: {target:.6g} bits requested, zero-cost coefficients alone carry {floor:.6g}"
        )

    lo, hi = 0.0, 1.0
    iters = 0
    while entropy(hi) > target:
        lo, hi = hi, 2.0 * hi
        iters += 1
        if iters >= max_iter:
            raise SolverError("could not bracket lambda")
    while iters < max_iter:
        mid = 0.5 * (lo + hi)
        h = entropy(mid)
        if abs(h - target) < tol:
            return mid
        if h > target:
            lo = mid
        else:
            hi = mid
        iters += 1
    raise SolverError(f"lambda bisection did not converge in {max_iter} steps")


def simulate_embedding(policy: np.ndarray, seed=None) -> np.ndarray:
    """Draw one ternary action per coefficient; deterministic for a fixed seed."""
    policy = np.asarray(policy, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random(policy.shape[:-1])
    m = np.zeros(policy.shape[:-1], dtype=np.int8)
    m[u < policy[..., 0]] = -1
    m[(u >= policy[..., 0]) & (u < policy[..., 0] + policy[..., 2])] = 1
    return m


def embed(cover: JpegImage, costs: np.ndarray, payload: PayloadSpec, seed=None) -> tuple[JpegImage, np.ndarray, float]:
    """Optimal-simulator embedding: solve lambda, sample, apply."""
    lam = solve_lambda(costs, payload, count_nzac(cover))
    m = simulate_embedding(probabilities_from_costs(costs, lam), seed)
    return cover.with_coefficients(cover.coefficients + m), m, lam


def costs_from_policy(q: np.ndarray) -> np.ndarray:
    """Invert ``pi(+-1) = q / 2``: ``rho = ln(2/q - 2)``.

    ``q`` is clamped to ``[1e-6, 2/3]``; ``q >= 2/3`` (the uniform policy or
    beyond) maps to exactly zero cost.
    """
    q = np.clip(np.asarray(q, dtype=np.float64), Q_FLOOR, Q_CEIL)
    rho = np.log(2.0 / q - 2.0)
    return np.where(q >= Q_CEIL, 0.0, np.maximum(rho, 0.0))


def policy_from_change_probability(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.stack([q / 2.0, 1.0 - q, q / 2.0], axis=-1)


def jmap_bytes(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[..., None]
    if values.ndim != 3 or values.shape[2] > 255:
        raise ValueError("map must be (H, W) or (H, W, C) with C <= 255")
    h, w, c = values.shape
    return JMAP_MAGIC + struct.pack("<IIB", h, w, c) + values.astype("<f4").tobytes()


def jmap_from_bytes(data: bytes) -> np.ndarray:
    """Decode a ``.jmap`` container to ``(H, W, C)`` float32."""
    if data[:4] != JMAP_MAGIC:
        raise ValueError("not a .jmap container (bad magic)")
    if len(data) < 13:
        raise ValueError("truncated .jmap container")
    h, w, c = struct.unpack_from("<IIB", data, 4)
    if len(data) != 13 + 4 * h * w * c:
        raise ValueError(".jmap size mismatch")
    return np.frombuffer(data, dtype="<f4", offset=13).reshape(h, w, c).astype(np.float32)


def save_jmap(path, values: np.ndarray) -> None:
    Path(path).write_bytes(jmap_bytes(values))


def load_jmap(path, squeeze: bool = True) -> np.ndarray:
    values = jmap_from_bytes(Path(path).read_bytes())
    if squeeze and values.shape[2] == 1:
        return values[..., 0]
    return values
