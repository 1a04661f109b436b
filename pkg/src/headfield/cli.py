"""Command line entry point: synth, fit-proxy, train, extract, reenact, eval.

Exit codes: 0 on success, 1 for invalid input (bad flags, configs, files),
2 when a stage fails at run time. Errors go to standard error prefixed with
the library error name.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import errors

log = logging.getLogger("headfield")

VALIDATION_ERRORS = (errors.ManifestInvalid, errors.ConfigMismatch, errors.DimensionMismatch,
                     errors.CorruptCheckpoint, ValueError, KeyError, FileNotFoundError,
                     IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the contract reserves 2 for run-time failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Defaults plus the value type as the placeholder of every valued flag."""

    TYPE_NAMES = {int: "INT", float: "FLOAT", Path: "PATH", str: "TEXT"}

    def _get_default_metavar_for_optional(self, action):
        return self.TYPE_NAMES.get(action.type, "TEXT")

    def _get_help_string(self, action):
        text = action.help or ""
        if action.required:
            return text + " (required)"
        if action.default is None or action.default is argparse.SUPPRESS or "%(default)" in text:
            return text
        return text + " (default: %(default)s)"


# ---------------------------------------------------------------------------
# configuration helpers

def parse_override(text: str) -> tuple[list, object]:
    """``"weights.pg=0.5"`` -> ``(["weights", "pg"], 0.5)``; values are JSON or plain strings."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    if not key:
        raise ValueError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(base: dict, overrides) -> dict:
    out = json.loads(json.dumps(base))
    for text in overrides or ():
        path, value = parse_override(text)
        node = out
        for k in path[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {text!r}: {k} is not a section")
        node[path[-1]] = value
    return out


def load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


def build_train_config(args):
    """Defaults, then the config file, then ``--set`` overrides, then dedicated flags."""
    from .trainer import TrainConfig

    layered = TrainConfig().to_dict()
    if args.config:
        layered = _merge(layered, load_json(args.config))
    layered = apply_overrides(layered, args.set)
    if args.epochs is not None:
        layered["epochs"] = args.epochs
    if args.seed is not None:
        layered["seed"] = args.seed
    return TrainConfig.from_dict(layered)


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def loss_csv_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.stem + ".losses.csv")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> None:
    from .synth import SynthSceneSpec, generate_dataset

    base = SynthSceneSpec().to_dict() if args.spec == "default" else \
        _merge(SynthSceneSpec().to_dict(), load_json(args.spec))
    spec_dict = apply_overrides(base, args.set)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    unknown = set(spec_dict) - set(SynthSceneSpec.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    spec = SynthSceneSpec.from_dict(spec_dict)
    generate_dataset(spec, args.out)
    log.info("wrote %d frames to %s", spec.n_frames, args.out)


def cmd_fit_proxy(args) -> None:
    from .proxy import (FitConfig, fit_proxy, landmark_errors, photometric_rmse, save_proxy,
                        synthetic_basis)
    from .synth import load_dataset

    ds = load_dataset(args.data)
    level = int(ds.manifest.get("scene", {}).get("basis_level", 4))
    basis = synthetic_basis(level, seed=0 if args.seed is None else args.seed)
    cfg = FitConfig(iters=args.iters) if args.iters is not None else FitConfig()
    frames = ds.proxy_frames()
    params = fit_proxy(frames, basis, cfg)
    save_proxy(args.out, basis, params, [f.intrinsics for f in ds.frames])
    log.info("landmark error %.4f px, photometric rmse %.5f",
             float(np.mean(landmark_errors(params, frames, basis))),
             photometric_rmse(params, frames, basis))


def cmd_train(args) -> None:
    from .proxy import load_proxy
    from .synth import load_dataset
    from .trainer import (checkpoint_from_state, load_checkpoint, prepare_scene,
                          save_checkpoint, state_from_checkpoint, train)

    config = build_train_config(args)
    ds = load_dataset(args.data)
    basis, params, _ = load_proxy(args.proxy)
    if params.n_frames != len(ds):
        raise errors.DimensionMismatch(f"proxy has {params.n_frames} frames, "
                                       f"dataset has {len(ds)}")
    scene = prepare_scene(ds, basis, params, config)
    state = None
    if args.resume:
        ckpt = load_checkpoint(args.resume, expect=config, force=args.force)
        state = state_from_checkpoint(ckpt, scene)
    end = config.epochs if args.stop_after is None else min(args.stop_after, config.epochs)
    every = args.save_every or max(end, 1)
    if args.save_every is not None and args.save_every <= 0:
        raise ValueError("--save-every must be positive")
    log_path = loss_csv_path(args.out)
    while True:
        start = state.epoch if state is not None else 0
        state = train(scene, config, state, log_path=log_path, stop_at=min(start + every, end))
        save_checkpoint(args.out, checkpoint_from_state(state))
        if state.epoch >= end:
            break
    if state.history:
        log.info("epoch %d total loss %.6f", state.epoch, state.history[-1].total)


def cmd_extract(args) -> None:
    from .mesh import write_obj
    from .trainer import extract_frame_mesh, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    if not 0 <= args.frame < len(ckpt.z_r):
        raise ValueError(f"frame {args.frame} outside 0..{len(ckpt.z_r) - 1}")
    mesh = extract_frame_mesh(ckpt, args.frame, resolution=args.resolution,
                              camera_space=not args.model_space)
    write_obj(args.out, mesh)
    log.info("mesh with %d vertices, %d faces", len(mesh.vertices), len(mesh.faces))


def driving_sequence(path) -> list:
    """``(pose, alpha_exp)`` pairs from a proxy file, or the ``proxy.hfp`` inside a directory."""
    from .proxy import load_proxy

    p = Path(path)
    if p.is_dir():
        p = p / "proxy.hfp"
    _, params, _ = load_proxy(p)
    return [(params.pose(j), params.alpha_exp[j]) for j in range(params.n_frames)]


def cmd_reenact(args) -> None:
    from .mesh import write_obj
    from .trainer import load_checkpoint, reenact

    ckpt = load_checkpoint(args.ckpt)
    meshes = reenact(ckpt, driving_sequence(args.drive), args.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for j, m in enumerate(meshes):
        write_obj(out / f"{j:04d}.obj", m)
    log.info("wrote %d meshes to %s", len(meshes), out)


def cmd_eval(args) -> None:
    from .evaluation import evaluate_checkpoint, evaluate_meshes, proxy_meshes
    from .synth import load_dataset

    ds = load_dataset(args.data)
    seed = 0 if args.seed is None else args.seed
    if args.ckpt:
        from .trainer import load_checkpoint
        report = evaluate_checkpoint(load_checkpoint(args.ckpt), ds, args.samples, seed,
                                     args.resolution)
    else:
        from .proxy import load_proxy
        basis, params, _ = load_proxy(args.proxy)
        report = evaluate_meshes(proxy_meshes(basis, params), ds, args.samples, seed)
    report.write_csv(args.out)
    print(f"mean chamfer {report.mean:.6f}")


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    parser = _Parser(prog="headfield", formatter_class=fmt,
                     description="Dynamic implicit head reconstruction pipeline.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more log output (repeatable)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS,
                       help="more log output (repeatable)")
        p.add_argument("--seed", type=int, default=None,
                       help="seed for every stochastic choice (unset: the config's seed)")
        return p

    p = add("synth", cmd_synth, "render a synthetic dataset")
    p.add_argument("--spec", type=str, default="default",
                   help="'default' or a JSON scene file")
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")
    p.add_argument("--set", action="append", metavar="KEY=JSON", default=[],
                   help="override a scene field (dotted keys, JSON values)")

    p = add("fit-proxy", cmd_fit_proxy, "fit the parametric proxy to a dataset")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="output proxy file (.hfp)")
    p.add_argument("--iters", type=int, default=None, help="joint fitting iterations")

    p = add("train", cmd_train, "optimise the head field")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--proxy", type=Path, required=True, help="fitted proxy file (.hfp)")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint (.hfc)")
    p.add_argument("--config", type=Path, default=None, help="JSON training config")
    p.add_argument("--set", action="append", metavar="KEY=JSON", default=[],
                   help="override a config field, e.g. weights.pg=0")
    p.add_argument("--epochs", type=int, default=None, help="number of epochs (unset: the config's)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true",
                   help="resume even if the configuration hash differs")
    p.add_argument("--save-every", type=int, default=None,
                   help="also write the checkpoint every this many epochs")
    p.add_argument("--stop-after", type=int, default=None,
                   help="stop once this epoch is reached; the checkpoint stays resumable")

    p = add("extract", cmd_extract, "extract one frame's surface as OBJ")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint (.hfc)")
    p.add_argument("--frame", type=int, required=True, help="frame index")
    p.add_argument("--out", type=Path, required=True, help="output OBJ file")
    p.add_argument("--resolution", type=int, default=None, help="grid cells per axis")
    p.add_argument("--model-space", action="store_true",
                   help="keep the head frame instead of camera coordinates")

    p = add("reenact", cmd_reenact, "drive a checkpoint with another sequence's pose and expression")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint (.hfc)")
    p.add_argument("--drive", type=Path, required=True,
                   help="driving proxy file, or a directory holding proxy.hfp")
    p.add_argument("--out", type=Path, required=True, help="output directory of OBJ files")
    p.add_argument("--resolution", type=int, default=None, help="grid cells per axis")

    p = add("eval", cmd_eval, "Chamfer evaluation against depth maps")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path, default=None, help="checkpoint (.hfc) to score")
    src.add_argument("--proxy", type=Path, default=None, help="score the proxy meshes instead")
    p.add_argument("--data", type=Path, required=True, help="dataset directory with depth")
    p.add_argument("--out", type=Path, required=True, help="output CSV report")
    p.add_argument("--samples", type=int, default=10_000, help="visible mesh samples per frame")
    p.add_argument("--resolution", type=int, default=None, help="grid cells per axis")
    return parser


def _configure_threads() -> None:
    raw = os.environ.get("HEADFIELD_THREADS")
    if raw:
        n = int(raw)
        if n <= 0:
            raise ValueError("HEADFIELD_THREADS must be a positive integer")
        torch.set_num_threads(n)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"UsageError: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _configure_threads()
        from .trainer import flush_denormals
        flush_denormals()
        args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a run-time error
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
