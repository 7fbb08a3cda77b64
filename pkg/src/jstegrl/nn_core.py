"""Network building blocks on top of torch autograd.

Provides the layer vocabulary shared by the policy and environment networks,
a small ``Graph`` wrapper exposing explicit forward/backward passes with
input gradients, Adam with step decay, and the ``.jckpt`` checkpoint format.
Tensors use torch's NCHW layout.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

LAYER_KINDS = (
    "conv",
    "deconv",
    "batchnorm",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tlu",
    "fully_connected",
    "softmax",
    "concat",
    "avgpool",
)

CKPT_MAGIC = b"JCK1"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TLU(nn.Module):
    """Truncation ``clamp(x, -T, T)``; gradient passes inside, zero outside."""

    def __init__(self, threshold: float = 8.0):
        super().__init__()
        if threshold <= 0:
            raise ValueError("TLU threshold must be positive")
        self.threshold = float(threshold)

    def forward(self, x):
        return torch.clamp(x, -self.threshold, self.threshold)

    def extra_repr(self):
        return f"threshold={self.threshold}"


class Concat(nn.Module):
    def __init__(self, dim: int = 1):
        super().__init__()
        self.dim = dim

    def forward(self, *xs):
        if len(xs) == 1 and isinstance(xs[0], (tuple, list)):
            xs = xs[0]
        return torch.cat(list(xs), dim=self.dim)


def same_padding(kernel: int, stride: int) -> int:
    # stride 1: output = input; stride 2: output = ceil(input / 2) for odd kernels
    return kernel // 2


def batchnorm(channels: int, momentum: float = 0.999, eps: float = 1e-5) -> nn.BatchNorm2d:
    """Batch norm with a moving-average momentum in the ``avg = m*avg + (1-m)*batch`` convention."""
    return nn.BatchNorm2d(channels, eps=eps, momentum=1.0 - momentum)


@dataclass
class LayerSpec:
    kind: str
    in_channels: int = 1
    out_channels: int = 1
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    threshold: float = 8.0
    negative_slope: float = 0.2
    bn_momentum: float = 0.999
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive")


def build_layer(spec: LayerSpec) -> nn.Module:
    pad = same_padding(spec.kernel, spec.stride) if spec.padding is None else spec.padding
    if spec.kind == "conv":
        return nn.Conv2d(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, pad)
    if spec.kind == "deconv":
        return nn.ConvTranspose2d(
            spec.in_channels, spec.out_channels, spec.kernel, spec.stride, pad, output_padding=spec.stride - 1
        )
    if spec.kind == "batchnorm":
        return batchnorm(spec.in_channels, spec.bn_momentum, spec.bn_eps)
    if spec.kind == "relu":
        return nn.ReLU()
    if spec.kind == "leaky_relu":
        return nn.LeakyReLU(spec.negative_slope)
    if spec.kind == "sigmoid":
        return nn.Sigmoid()
    if spec.kind == "tlu":
        return TLU(spec.threshold)
    if spec.kind == "fully_connected":
        return nn.Sequential(nn.Flatten(), nn.Linear(spec.in_channels, spec.out_channels))
    if spec.kind == "softmax":
        return nn.Softmax(dim=1)
    if spec.kind == "concat":
        return Concat(dim=1)
    return nn.AvgPool2d(spec.kernel, spec.stride, pad, count_include_pad=True)


def init_weights(module: nn.Module) -> None:
    """Zero-mean normal weights with variance ``2 / fan_in``; zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            if m.weight.requires_grad:
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None and m.bias.requires_grad:
                nn.init.zeros_(m.bias)


def install_finite_checks(module: nn.Module) -> None:
    """Raise :class:`NonFiniteError` as soon as any submodule emits NaN/Inf."""

    def hook(mod, _inputs, output):
        if isinstance(output, torch.Tensor) and not torch.isfinite(output).all():
            raise NonFiniteError(f"non-finite activation after {mod.__class__.__name__}")

    for sub in module.modules():
        if not list(sub.children()):
            sub.register_forward_hook(hook)


@dataclass
class Gradients:
    input: torch.Tensor | None
    params: dict[str, torch.Tensor]


class Graph:
    """Explicit forward/backward around a module, exposing the input gradient."""

    def __init__(self, module: nn.Module, input_shape: tuple | None = None):
        self.module = module
        self.input_shape = input_shape
        self._input = None
        self._output = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ValueError(f"expected input shape (N, {self.input_shape}), got {tuple(x.shape)}")
        x = x.detach().requires_grad_(True)
        out = self.module(x)
        if not torch.isfinite(out).all():
            raise NonFiniteError("non-finite network output")
        self._input, self._output = x, out
        return out

    def backward(self, loss_grad: torch.Tensor) -> Gradients:
        if self._output is None:
            raise RuntimeError("backward called before forward")
        names, params = [], []
        for name, p in self.module.named_parameters():
            if p.requires_grad:
                names.append(name)
                params.append(p)
        grads = torch.autograd.grad(
            self._output, [self._input, *params], grad_outputs=loss_grad, allow_unused=True
        )
        out = {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads[1:])}
        self._output = None
        return Gradients(grads[0], out)


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_every: int = 30_000
    decay_factor: float = 0.1


class Adam:
    """Adam with a step-decay learning-rate schedule (``lr * factor**(step // every)``)."""

    def __init__(self, params: Iterable[torch.nn.Parameter], config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self.params = [p for p in params if p.requires_grad]
        c = self.config
        self.optimizer = torch.optim.Adam(
            self.params, lr=c.lr, betas=(c.beta1, c.beta2), eps=c.eps, foreach=False
        )
        self.step_count = 0

    def lr_at(self, step: int) -> float:
        c = self.config
        return c.lr * c.decay_factor ** (step // c.decay_every)

    def step(self, grads: Iterable[torch.Tensor] | None = None) -> None:
        if grads is not None:
            grads = list(grads)
            if len(grads) != len(self.params):
                raise ValueError("gradient list does not match parameter list")
            for p, g in zip(self.params, grads):
                if g.shape != p.shape:
                    raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
                p.grad = g.detach().clone()
        for group in self.optimizer.param_groups:
            group["lr"] = self.lr_at(self.step_count)
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.step_count += 1

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, p in enumerate(self.params):
            st = self.optimizer.state.get(p)
            if not st:
                continue
            out[f"{prefix}{i}.exp_avg"] = st["exp_avg"].detach().numpy()
            out[f"{prefix}{i}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
            out[f"{prefix}{i}.step"] = np.array([float(st["step"])])
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], prefix: str, step_count: int) -> None:
        self.optimizer.state.clear()
        for i, p in enumerate(self.params):
            key = f"{prefix}{i}"
            if f"{key}.exp_avg" not in tensors:
                continue
            self.optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"{key}.step"][0])),
                "exp_avg": torch.from_numpy(tensors[f"{key}.exp_avg"].copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(tensors[f"{key}.exp_avg_sq"].copy()).to(p.dtype),
            }
        self.step_count = step_count


def adam_step(state: Adam, params, grads) -> None:
    """Apply one Adam update of ``params`` with ``grads`` (parameters are updated in place)."""
    params = list(params)
    if len(params) != len(state.params) or any(a is not b for a, b in zip(params, state.params)):
        raise ValueError("parameters do not match the optimizer state")
    state.step(grads)


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Parameters and buffers (batch-norm statistics included) as numpy arrays."""
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for k, v in module.state_dict().items():
        key = prefix + k
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {key!r}: {arr.shape} vs {tuple(v.shape)}")
        state[k] = torch.from_numpy(np.array(arr)).to(v.dtype)
    module.load_state_dict(state)


def checkpoint_bytes(tensors: dict[str, np.ndarray], step: int, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQI", CKPT_VERSION, step, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8" if arr.dtype.itemsize == 8 else "<f4")
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> tuple[dict[str, np.ndarray], int, dict]:
    try:
        if data[:4] != CKPT_MAGIC:
            raise CheckpointError("not a .jckpt file (bad magic)")
        version, step, count = struct.unpack_from("<IQI", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointVersionError(f"checkpoint format version {version}, expected {CKPT_VERSION}")
        pos = 4 + struct.calcsize("<IQI")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dtype = _CODE_DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(data):
                raise CheckpointError("truncated checkpoint")
            tensors[name] = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=pos).reshape(shape).copy()
            pos += size
        (mlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + mlen != len(data):
            raise CheckpointError("trailing or missing bytes in checkpoint")
        meta = json.loads(data[pos : pos + mlen].decode("utf-8"))
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return tensors, step, meta


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors: dict[str, np.ndarray], step: int, meta: dict | None = None) -> None:
    atomic_write(path, checkpoint_bytes(tensors, step, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())
