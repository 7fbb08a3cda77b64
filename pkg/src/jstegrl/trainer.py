"""Alternating policy/environment training, telemetry and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .distortion import costs_from_policy, simulate_embedding
from .env_net import EnvNet, EnvNetConfig, env_accuracy, env_loss_logits, gradient_map, reward_map
from .jpeg_model import JpegImage, compress, decompress, quality_to_quant_table
from .nn_core import (
    Adam,
    AdamConfig,
    CheckpointError,
    NonFiniteError,
    checkpoint_from_bytes,
    load_module_tensors,
    module_tensors,
    save_checkpoint,
)
from .policy_net import (
    PolicyNet,
    PolicyNetConfig,
    change_probabilities,
    entropy_bits,
    payload_capacity_bits,
    policy_from_q,
    policy_loss,
)

log = logging.getLogger(__name__)

TELEMETRY_COLUMNS = ("iteration", "l_A", "l_R", "l_C", "l_E", "mean_reward", "payload_entropy", "env_accuracy")

# Policy-side (texture provider) and environment-side (preset) choice per variant.
VARIANTS = {
    "base": ("learned-unet", "base"),
    "I": ("learned-blockwise", "base"),
    "II": ("learned-unet", "II"),
    "III": ("learned-unet", "III"),
    "IV": ("learned-unet", "IV"),
    "V": ("learned-unet", "V"),
    "VI": ("learned-unet", "VI"),
    "juni": ("wavelet-fixed", "base"),
    "msu": ("msu-fixed", "base"),
}


@dataclass
class TrainConfig:
    batch: int = 8
    payload_bpnzac: float = 0.4
    alpha: float = 1.0
    beta: float = 1e-4
    xi: float = 1e7
    policy_lr: float = 1e-3
    env_lr: float = 1e-3
    decay_every: int = 30_000
    decay_factor: float = 0.1
    iterations: int = 2000
    seed: int = 0
    policy_updates: int = 1
    env_updates: int = 1
    env_warmup: int = 0
    checkpoint_every: int = 0
    image_dir: str = ""
    image_size: int = 64
    qf: int = 75
    variant: str = "base"
    texture_provider: str = ""
    unet_channels: tuple[int, ...] = (16, 32, 64, 128)
    filter_bank: str = ""
    bn_momentum: float = 0.99
    threads: int = 1

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.payload_bpnzac > 0:
            raise ValueError("payload must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}")
        if self.policy_updates < 0 or self.env_updates < 0 or self.policy_updates + self.env_updates == 0:
            raise ValueError("update ratio needs at least one nonzero side")
        self.unet_channels = tuple(int(c) for c in self.unet_channels)
        if self.image_size % 16:
            raise ValueError("image_size must be a multiple of 16")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Full-scale schedule: batch 24, lr 1e-4 decayed 10x every 30k steps, 90k steps."""
        base = dict(
            batch=24, beta=1e-7, xi=1e7, policy_lr=1e-4, env_lr=1e-4, iterations=90_000,
            image_size=256, bn_momentum=0.999, checkpoint_every=5000,
        )
        return cls(**{**base, **overrides})

    def policy_config(self) -> PolicyNetConfig:
        provider = self.texture_provider or VARIANTS[self.variant][0]
        return PolicyNetConfig(
            texture_provider=provider, unet_channels=self.unet_channels, payload_bpnzac=self.payload_bpnzac, alpha=self.alpha,
            beta=self.beta, bn_momentum=self.bn_momentum,
        )

    def env_config(self) -> EnvNetConfig:
        _, preset = VARIANTS[self.variant]
        extra = {"filter_bank": self.filter_bank} if self.filter_bank else {}
        return EnvNetConfig.preset(preset, xi=self.xi, bn_momentum=self.bn_momentum, **extra)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["unet_channels"] = list(self.unet_channels)
        return out


def synthetic_covers(count: int, size: int = 64, qf: int = 75, seed=0) -> tuple[list[JpegImage], np.ndarray]:
    """Covers with one smooth and one noisy vertical half.

    Returns the images and a boolean ``(count, size, size)`` mask of the
    noisy half.
    """
    rng = np.random.default_rng(seed)
    table = quality_to_quant_table(qf)
    yy, xx = np.mgrid[0:size, 0:size] / size
    images, masks = [], []
    for _ in range(count):
        phase = rng.uniform(0, 2 * np.pi)
        smooth = 128 + 40 * np.sin(2 * np.pi * (0.6 * xx + 0.4 * yy) + phase) + rng.normal(0, 1.0, (size, size))
        noisy = 128 + rng.normal(0, 45.0, (size, size))
        noisy_left = bool(rng.integers(2))
        mask = np.zeros((size, size), bool)
        if noisy_left:
            mask[:, : size // 2] = True
        else:
            mask[:, size // 2 :] = True
        plane = np.clip(np.rint(np.where(mask, noisy, smooth)), 0, 255)
        images.append(compress(plane, table))
        masks.append(mask)
    return images, np.stack(masks)


class ImageSource:
    """Seeded shuffled stream over a fixed image list, one permutation per epoch."""

    def __init__(self, images: list[JpegImage], seed: int = 0):
        if not images:
            raise ValueError("image source is empty")
        self.images = list(images)
        self.seed = seed
        self.epoch = 0
        self.position = 0
        self.epoch_log: list[list[int]] = []
        self._order = self._permutation(0)

    def _permutation(self, epoch: int) -> list[int]:
        perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.images)).tolist()
        if len(self.epoch_log) <= epoch:
            self.epoch_log.append(perm)
        return perm

    def next_batch(self, n: int) -> list[JpegImage]:
        out = []
        while len(out) < n:
            if self.position == len(self._order):
                self.epoch += 1
                self.position = 0
                self._order = self._permutation(self.epoch)
            out.append(self.images[self._order[self.position]])
            self.position += 1
        return out

    def cursor(self) -> dict:
        return {"epoch": self.epoch, "position": self.position}

    def seek(self, cursor: dict) -> None:
        self.epoch_log = []
        for e in range(cursor["epoch"] + 1):
            self._order = self._permutation(e)
        self.epoch, self.position = cursor["epoch"], cursor["position"]


def load_image_dir(path) -> list[JpegImage]:
    """All ``.jcoef`` and baseline ``.jpg``/``.jpeg`` files of a directory, sorted by name."""
    from .jpeg_model import load_jcoef
    from .jpeg_parser import parse_baseline_jpeg

    images = []
    for p in sorted(Path(path).iterdir()):
        suffix = p.suffix.lower()
        if suffix == ".jcoef":
            images.append(load_jcoef(p))
        elif suffix in (".jpg", ".jpeg"):
            images.append(parse_baseline_jpeg(p.read_bytes()))
    if not images:
        raise ValueError(f"no .jcoef or .jpg images in {path}")
    return images


def _pixels(images: list[JpegImage]) -> torch.Tensor:
    return torch.from_numpy(np.stack([decompress(im, level_shift=False) for im in images])[:, None]).float()


class TrainState:
    def __init__(self, config: TrainConfig, source: ImageSource | None = None):
        self.config = config
        torch.manual_seed(config.seed)
        self.policy = PolicyNet(config.policy_config())
        self.env = EnvNet(config.env_config())
        self.policy_opt = Adam(self.policy.parameters(), self._adam(config.policy_lr))
        self.env_opt = Adam(self.env.parameters(), self._adam(config.env_lr))
        self.rng = np.random.default_rng(config.seed)
        self.source = source
        self.iteration = 0
        self.telemetry: list[dict] = []
        self.accuracy_window: deque = deque(maxlen=100)
        self.warnings: list[str] = []
        self.last_maps: dict = {}

    def _adam(self, lr):
        c = self.config
        return AdamConfig(lr=lr, decay_every=c.decay_every, decay_factor=c.decay_factor)

    # -- checkpointing -------------------------------------------------

    def tensors(self) -> dict[str, np.ndarray]:
        out = module_tensors(self.policy, "policy.")
        out.update(module_tensors(self.env, "env."))
        out.update(self.policy_opt.state_tensors("adam.policy."))
        out.update(self.env_opt.state_tensors("adam.env."))
        return out

    def meta(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "rng": self.rng.bit_generator.state,
            "cursor": self.source.cursor() if self.source else None,
            "epoch_log": self.source.epoch_log if self.source else [],
            "accuracy_window": list(self.accuracy_window),
            "policy_opt_steps": self.policy_opt.step_count,
            "env_opt_steps": self.env_opt.step_count,
            "torch_rng": torch.get_rng_state().numpy().tolist(),
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.tensors(), self.iteration, self.meta())

    @classmethod
    def restore(cls, path, source: ImageSource | None = None) -> "TrainState":
        tensors, step, meta = checkpoint_from_bytes(Path(path).read_bytes())
        try:
            config = TrainConfig(**meta["config"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"checkpoint carries no usable training config: {exc}") from exc
        state = cls(config, source)
        load_module_tensors(state.policy, tensors, "policy.")
        load_module_tensors(state.env, tensors, "env.")
        state.policy_opt.load_state_tensors(tensors, "adam.policy.", meta["policy_opt_steps"])
        state.env_opt.load_state_tensors(tensors, "adam.env.", meta["env_opt_steps"])
        state.rng.bit_generator.state = meta["rng"]
        state.iteration = step
        state.accuracy_window.extend(meta["accuracy_window"])
        torch.set_rng_state(torch.tensor(meta["torch_rng"], dtype=torch.uint8))
        if source is not None and meta["cursor"] is not None:
            source.seek(meta["cursor"])
        return state

    # -- training --------------------------------------------------------

    def _updates(self) -> tuple[bool, bool]:
        c = self.config
        if self.iteration < c.env_warmup:
            return False, True
        cycle = max(c.policy_updates, c.env_updates)
        phase = (self.iteration - c.env_warmup) % cycle
        return phase < c.policy_updates, phase < c.env_updates

    def train_step(self, images: list[JpegImage] | None = None) -> dict:
        c = self.config
        if images is None:
            if self.source is None:
                raise ValueError("no batch given and no image source attached")
            images = self.source.next_batch(c.batch)
        n = len(images)
        update_policy, update_env = self._updates()
        self.policy.train()
        self.env.train()

        q = self.policy(self.policy.prepare(images))[:, 0]
        q_np = q.detach().double().numpy()
        actions = simulate_embedding(policy_from_q(q_np), self.rng)
        stegos = [im.with_coefficients(im.coefficients + m) for im, m in zip(images, actions)]

        cover_t = _pixels(images)
        stego_t = _pixels(stegos).requires_grad_(True)
        logits = self.env.logits(torch.cat([cover_t, stego_t]))
        l_e = env_loss_logits(logits, n)
        env_params = self.env_opt.params
        if not torch.isfinite(l_e):
            raise NonFiniteError(f"non-finite environment loss at iteration {self.iteration + 1}")
        grads = torch.autograd.grad(l_e, [stego_t, *env_params])
        # Per-pair loss gradient: undo the batch average.
        pixel_grad = grads[0][:, 0] * n
        g = np.stack([gradient_map(pg, im.table.steps) for pg, im in zip(pixel_grad, images)])
        rewards = reward_map(actions, g, c.xi)

        capacity = payload_capacity_bits(images, c.payload_bpnzac)
        l_a, l_r, l_c = policy_loss(q, actions.astype(np.int64), rewards, capacity, c.alpha, c.beta)
        entropy = float(entropy_bits(q.detach().double()).mean())
        accuracy = env_accuracy(logits.detach(), n)
        row = {
            "iteration": self.iteration + 1,
            "l_A": l_a.item(),
            "l_R": l_r.item(),
            "l_C": l_c.item(),
            "l_E": l_e.item(),
            "mean_reward": float(rewards.mean()),
            "payload_entropy": entropy,
            "env_accuracy": accuracy,
            "capacity": float(capacity.mean()),
        }
        if not all(np.isfinite(v) for v in row.values()):
            raise NonFiniteError(f"non-finite loss at iteration {row['iteration']}: {row}")

        if update_policy:
            self.policy.zero_grad(set_to_none=True)
            l_a.backward()
            self.policy_opt.step()
        if update_env:
            self.env_opt.step(grads[1:])

        self.iteration += 1
        self.last_maps = {"actions": actions, "gradients": g, "rewards": rewards, "q": q_np}
        self.telemetry.append(row)
        self._guard(accuracy)
        return row

    def _guard(self, accuracy: float) -> None:
        self.accuracy_window.append(accuracy)
        if len(self.accuracy_window) == self.accuracy_window.maxlen:
            mean = float(np.mean(self.accuracy_window))
            if (mean > 0.99 or mean < 0.5) and self.iteration % 100 == 0:
                msg = f"iteration {self.iteration}: env accuracy over the last 100 steps is {mean:.3f}"
                self.warnings.append(msg)
                log.warning("stability: %s", msg)

    def run(self, iterations: int | None = None, telemetry_path=None, checkpoint_path=None) -> list[dict]:
        c = self.config
        total = c.iterations if iterations is None else iterations
        rows = []
        for _ in range(total):
            row = self.train_step()
            rows.append(row)
            if telemetry_path is not None:
                append_telemetry(telemetry_path, [row])
            if checkpoint_path is not None and c.checkpoint_every and self.iteration % c.checkpoint_every == 0:
                self.save(checkpoint_path)
        return rows


def append_telemetry(path, rows: list[dict]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TELEMETRY_COLUMNS, extrasaction="ignore")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in TELEMETRY_COLUMNS})


def export_costs(model, image: JpegImage) -> np.ndarray:
    """Deployment path: policy forward in inference mode, then ``rho = ln(2/q - 2)``.

    ``model`` is a :class:`PolicyNet` or anything holding one as ``.policy``.
    """
    net = model if isinstance(model, PolicyNet) else model.policy
    return costs_from_policy(change_probabilities(net, [image])[0])
