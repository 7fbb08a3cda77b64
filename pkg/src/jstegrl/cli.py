"""Command-line entry point: ``jstegrl <command> [flags]``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, analysis, uerd
from .config import ConfigError, load_config
from .distortion import (
    PayloadSpec,
    jmap_bytes,
    load_jmap,
    probabilities_from_costs,
    simulate_embedding,
    solve_lambda,
)
from .jpeg_model import JpegImage, compress, count_nzac, jcoef_bytes, load_jcoef, quality_to_quant_table
from .jpeg_parser import parse_baseline_jpeg
from .nn_core import CheckpointError, atomic_write, checkpoint_from_bytes, load_module_tensors
from .policy_net import PolicyNet
from .trainer import ImageSource, TrainConfig, TrainState, export_costs, load_image_dir, synthetic_covers

BANKS = ("dct8", "dct4", "srm30", "learnable")
VARIANT_CHOICES = ("base", "I", "II", "III", "IV", "V", "VI", "juni", "msu")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_image(path, qf: int = 75) -> JpegImage:
    """``.jcoef``, baseline ``.jpg``, or an 8-bit PGM compressed at ``qf``."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".jcoef":
        return load_jcoef(path)
    if suffix in (".jpg", ".jpeg"):
        return parse_baseline_jpeg(path.read_bytes())
    if suffix == ".pgm":
        return compress(analysis.read_pgm(path).astype(np.float64), quality_to_quant_table(qf))
    raise ValueError(f"unsupported input format {suffix!r} (expected .jcoef, .jpg or .pgm)")


def _digest(path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for child in sorted(p.iterdir()):
            if child.is_file():
                h.update(child.name.encode())
                h.update(child.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(args, outputs: list, config: dict | None = None, inputs: list | None = None) -> Path | None:
    """Record the invocation next to its first output, atomically, before the outputs exist."""
    if not outputs:
        return None
    first = Path(outputs[0])
    target = first / "manifest.json" if first.is_dir() else first.with_name(first.name + ".manifest.json")
    manifest = {
        "tool": "jstegrl",
        "version": __version__,
        "command": args.command,
        "argv": args.argv,
        "seed": getattr(args, "seed", None),
        "config": config if config is not None else {k: v for k, v in vars(args).items() if k != "argv"},
        "inputs": {str(p): _digest(p) for p in (inputs or []) if p is not None and Path(p).exists()},
        "outputs": [str(o) for o in outputs],
    }
    atomic_write(target, (json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n").encode())
    return target


def _need(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command} requires --{name.replace('_', '-')}")


def cmd_cost_uerd(args):
    _need(args, "inp", "out")
    image = load_image(args.inp, args.qf)
    write_manifest(args, [args.out], inputs=[args.inp])
    atomic_write(args.out, jmap_bytes(uerd.uerd_cost(image)))


def _payload(args):
    try:
        return PayloadSpec.parse(args.payload)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_lambda_solve(args):
    _need(args, "costs", "payload")
    payload = _payload(args)
    costs = load_jmap(args.costs)
    nzac = 0
    if payload.mode == "bpnzAC":
        _need(args, "inp")
        nzac = count_nzac(load_image(args.inp, args.qf))
    lam = solve_lambda(costs, payload, nzac)
    line = json.dumps({"lambda": lam, "payload_bits": payload.resolve(nzac)})
    if args.out:
        write_manifest(args, [args.out], inputs=[args.costs, args.inp])
        atomic_write(args.out, (line + "\n").encode())
    print(line)


def cmd_embed_sim(args):
    _need(args, "inp", "costs", "payload", "out")
    payload = _payload(args)
    image = load_image(args.inp, args.qf)
    costs = load_jmap(args.costs)
    if costs.shape != image.shape:
        raise ValueError(f"cost map {costs.shape} does not match image {image.shape}")
    lam = solve_lambda(costs, payload, count_nzac(image))
    changes = simulate_embedding(probabilities_from_costs(costs, lam), args.seed)
    outputs = [args.out] + ([args.stego] if args.stego else [])
    write_manifest(args, outputs, inputs=[args.inp, args.costs])
    atomic_write(args.out, jmap_bytes(changes.astype(np.float32)))
    if args.stego:
        atomic_write(args.stego, jcoef_bytes(image.with_coefficients(image.coefficients + changes)))


def _train_config(args) -> TrainConfig:
    overrides = {
        "seed": args.seed if args.seed_given else None,
        "iterations": args.iters,
        "batch": args.batch,
        "variant": args.variant,
        "filter_bank": args.bank,
        "qf": args.qf if args.qf_given else None,
        "threads": args.threads,
        "image_dir": args.inp,
    }
    if args.payload is not None:
        payload = _payload(args)
        if payload.mode != "bpnzAC":
            raise UsageError("training payload must be given in bpnzAC")
        overrides["payload_bpnzac"] = payload.value
    return load_config(args.config, overrides)


def cmd_train(args):
    _need(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        _, _, meta = checkpoint_from_bytes(Path(args.checkpoint).read_bytes())
        config = TrainConfig(**meta["config"])
        if args.iters is not None:
            config.iterations = args.iters
    else:
        config = _train_config(args)
    if config.image_dir:
        images = load_image_dir(config.image_dir)
    else:
        images, _ = synthetic_covers(64, config.image_size, config.qf, config.seed)
    source = ImageSource(images, config.seed)
    write_manifest(args, [out], config=config.to_dict(), inputs=[config.image_dir or None, args.checkpoint])
    if args.checkpoint:
        state = TrainState.restore(args.checkpoint, source)
    else:
        state = TrainState(config, source)
    remaining = config.iterations - state.iteration
    ckpt = out / "checkpoint.jckpt"
    state.run(max(remaining, 0), telemetry_path=out / "telemetry.csv", checkpoint_path=ckpt)
    state.save(ckpt)
    for msg in state.warnings:
        print(f"warning: {msg}", file=sys.stderr)


def cmd_export_costs(args):
    _need(args, "checkpoint", "inp", "out")
    tensors, _, meta = checkpoint_from_bytes(Path(args.checkpoint).read_bytes())
    try:
        config = TrainConfig(**meta["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint carries no usable training config: {exc}") from exc
    # Only the policy is rebuilt; the environment never enters memory here.
    net = PolicyNet(config.policy_config())
    load_module_tensors(net, tensors, "policy.")
    image = load_image(args.inp, args.qf)
    write_manifest(args, [args.out], inputs=[args.checkpoint, args.inp])
    atomic_write(args.out, jmap_bytes(export_costs(net, image).astype(np.float32)))


def cmd_analyze_gradients(args):
    _need(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.inp:
        images = load_image_dir(args.inp)
    else:
        images, _ = synthetic_covers(20, 64, args.qf, args.seed)
    banks = [args.bank] if args.bank else ["dct8", "dct4", "srm30"]
    if "learnable" in banks:
        raise UsageError("analyze-gradients needs a fixed filter bank")
    write_manifest(args, [out], inputs=[args.inp])
    stats = {}
    for bank in banks:
        e = analysis.accum_grad_average(images, bank)
        _, stats[bank] = analysis.top_n_stats(e)
        atomic_write(out / f"accum_{bank}.jmap", jmap_bytes(analysis.normalize(e).transpose(1, 2, 0)))
        for c, m in enumerate(e):
            analysis.write_pgm(out / f"heat_{bank}_{c:02d}.pgm", analysis.heatmap(m))
        atomic_write(out / f"spectra_{bank}.jmap", jmap_bytes(analysis.filter_spectra(bank).transpose(1, 2, 0)))
    analysis.write_sn_csv(out / "top_n_statistics.csv", stats)
    print(json.dumps({b: stats[b].tolist() for b in banks}))


def cmd_emit_maps(args):
    _need(args, "inp", "out")
    values = load_jmap(args.inp, squeeze=False)
    values = values[..., 0] if values.shape[2] == 1 else values
    kind = args.kind
    if kind == "auto" and np.isin(values, (-1, 0, 1)).all() and values.ndim == 2:
        values = values.astype(np.int8)
    write_manifest(args, [args.out], inputs=[args.inp])
    analysis.emit_maps(values, args.out, kind, png=args.png)


def cmd_parse_jpeg(args):
    _need(args, "inp", "out")
    image = parse_baseline_jpeg(Path(args.inp).read_bytes())
    write_manifest(args, [args.out], inputs=[args.inp])
    atomic_write(args.out, jcoef_bytes(image))


def _scores(path) -> np.ndarray:
    return np.array([float(tok) for tok in Path(path).read_text().split()])


def cmd_detect_pe(args):
    _need(args, "cover", "stego")
    pe = analysis.detection_error(_scores(args.cover), _scores(args.stego))
    line = json.dumps({"P_E": pe})
    if args.out:
        write_manifest(args, [args.out], inputs=[args.cover, args.stego])
        atomic_write(args.out, (line + "\n").encode())
    print(line)


COMMANDS = {
    "cost-uerd": (cmd_cost_uerd, "UERD cost map of an image"),
    "lambda-solve": (cmd_lambda_solve, "solve for the Gibbs lambda that carries a payload"),
    "embed-sim": (cmd_embed_sim, "simulate optimal ternary embedding"),
    "train": (cmd_train, "train the policy and environment networks"),
    "export-costs": (cmd_export_costs, "cost map from a trained policy checkpoint"),
    "analyze-gradients": (cmd_analyze_gradients, "accumulated gradient matrices and top-n statistics"),
    "emit-maps": (cmd_emit_maps, "render a .jmap as an 8-bit PGM/PNG"),
    "parse-jpeg": (cmd_parse_jpeg, "extract quantized coefficients from a baseline JPEG"),
    "detect-pe": (cmd_detect_pe, "minimum average detection error from two score files"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jstegrl", description="JPEG cost learning and steganography tools")
    parser.add_argument("--version", action="version", version=f"jstegrl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--in", dest="inp")
        p.add_argument("--out")
        p.add_argument("--costs")
        p.add_argument("--payload")
        p.add_argument("--seed", type=int)
        p.add_argument("--config")
        p.add_argument("--qf", type=int)
        p.add_argument("--bank", choices=BANKS)
        p.add_argument("--variant", choices=VARIANT_CHOICES)
        p.add_argument("--iters", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--checkpoint")
        if name == "embed-sim":
            p.add_argument("--stego", help="also write the stego image as .jcoef")
        if name == "emit-maps":
            p.add_argument("--kind", choices=("auto", "continuous", "modification"), default="auto")
            p.add_argument("--png", action="store_true")
        if name == "detect-pe":
            p.add_argument("--cover", help="whitespace-separated cover scores")
            p.add_argument("--stego", help="whitespace-separated stego scores")
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        args.seed_given = args.seed is not None
        args.qf_given = args.qf is not None
        args.seed = 0 if args.seed is None else args.seed
        args.qf = 75 if args.qf is None else args.qf
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            torch.set_num_threads(args.threads)
        COMMANDS[args.command][0](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
