"""Command-line entry point: gen-data, train, eval, predict, verify.

Commands are driven by a JSON run configuration with four sections (model,
train, data, paths); unknown keys are rejected before any work starts.
Exit codes are a stable contract: 0 ok, 2 configuration error, 3 training
divergence, 4 checkpoint or shape error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    DiskDataset,
    SyntheticSpec,
    read_otf,
    read_pgm,
    write_dataset,
    write_mask_pgm,
    write_otf,
)
from .net import (
    CheckpointError,
    ModelConfig,
    OmegaNet,
    load_checkpoint,
    restore_parameters,
    save_checkpoint,
)
from .tensor import ShapeError, Tensor, no_grad, sigmoid
from .train import (
    AdamState,
    DivergenceError,
    TrainLoopConfig,
    adam_state_arrays,
    adam_state_from_arrays,
    binarize,
    evaluate,
    format_metrics,
    train,
    write_history_csv,
    write_metrics_csv,
)
from . import verify

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_CHECKPOINT = 4


class ConfigError(ValueError):
    """Invalid or missing run configuration."""


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainLoopConfig
    lr: float
    weight_decay: float
    data: SyntheticSpec
    paths: dict


_TRAIN_KEYS = {
    "epochs", "micro_batch_size", "accumulation_steps", "eval_interval",
    "threshold", "seed", "lr", "weight_decay",
}
_DATA_KEYS = {
    "image_size", "n_samples", "organ_radius", "tumor_radius", "noise_sigma",
    "background_level", "organ_level", "tumor_level", "seed",
}
_PATH_KEYS = {"data_dir", "checkpoint", "metrics_csv"}


def _check_keys(section: str, given: dict, allowed: set):
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}' section: {sorted(unknown)}")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    _check_keys("top level", raw, {"model", "train", "data", "paths"})
    for section in ("model", "train", "data", "paths"):
        if section not in raw:
            raise ConfigError(f"config file {path} is missing the '{section}' section")

    try:
        model = ModelConfig.from_dict(raw["model"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model config: {e}") from e

    tr = dict(raw["train"])
    _check_keys("train", tr, _TRAIN_KEYS)
    lr = float(tr.pop("lr", 1e-4))
    weight_decay = float(tr.pop("weight_decay", 0.00015))
    try:
        loop = TrainLoopConfig(**tr).validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from e
    if lr <= 0 or weight_decay < 0:
        raise ConfigError("lr must be > 0 and weight_decay >= 0")

    da = dict(raw["data"])
    _check_keys("data", da, _DATA_KEYS)
    for key in ("organ_radius", "tumor_radius"):
        if key in da:
            da[key] = tuple(da[key])
    try:
        spec = SyntheticSpec(**da).validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid data config: {e}") from e

    paths = dict(raw["paths"])
    _check_keys("paths", paths, _PATH_KEYS)
    for key in _PATH_KEYS:
        if key not in paths or not isinstance(paths[key], str) or not paths[key]:
            raise ConfigError(f"paths section must set a non-empty '{key}'")

    return RunConfig(model=model, train=loop, lr=lr, weight_decay=weight_decay,
                     data=spec, paths=paths)


def channel_names(n: int):
    return ["organ", "tumor"] if n == 2 else [f"channel_{i}" for i in range(n)]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out) if args.out else Path(cfg.paths["data_dir"])
    try:
        manifest = write_dataset(cfg.data, out, force=args.force)
    except FileExistsError as e:
        raise ConfigError(str(e)) from e
    print(f"wrote {cfg.data.n_samples} samples to {out}: "
          + ", ".join(f"{k}={v}" for k, v in manifest["splits"].items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    lr = args.lr if args.lr is not None else cfg.lr
    dataset = DiskDataset(cfg.paths["data_dir"], "train")
    if args.resume:
        ckpt_config, entries = load_checkpoint(args.resume)
        net = OmegaNet(ckpt_config, seed=cfg.train.seed)
        extra = restore_parameters(net, entries)
        adam = adam_state_from_arrays(extra, lr=lr, weight_decay=cfg.weight_decay)
    else:
        net = OmegaNet(cfg.model, seed=cfg.train.seed)
        adam = AdamState(lr=lr, weight_decay=cfg.weight_decay)

    checkpoint_path = cfg.paths["checkpoint"]
    Path(checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
    Path(cfg.paths["metrics_csv"]).parent.mkdir(parents=True, exist_ok=True)
    try:
        history = train(net, dataset, cfg.train, adam=adam,
                        checkpoint_path=checkpoint_path)
    except DivergenceError as e:
        write_history_csv(cfg.paths["metrics_csv"], e.history, net.config.out_channels)
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE

    save_checkpoint(net, checkpoint_path, extra=adam_state_arrays(adam))
    write_history_csv(cfg.paths["metrics_csv"], history, net.config.out_channels)
    print(f"trained {len(history)} steps; checkpoint {checkpoint_path}")
    try:
        val = DiskDataset(cfg.paths["data_dir"], "val")
    except FileNotFoundError:
        val = None
    if val is not None and len(val) > 0:
        report = evaluate(net, val, threshold=cfg.train.threshold,
                          micro_batch_size=cfg.train.micro_batch_size)
        print("validation metrics:")
        print(format_metrics(report, channel_names(net.config.out_channels)))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    checkpoint = args.checkpoint or cfg.paths["checkpoint"]
    net = OmegaNet(cfg.model, seed=0)
    _, entries = load_checkpoint(checkpoint)
    restore_parameters(net, entries)
    dataset = DiskDataset(cfg.paths["data_dir"], args.split)
    if len(dataset) == 0:
        raise ConfigError(f"split '{args.split}' in {cfg.paths['data_dir']} is empty")
    report = evaluate(net, dataset, threshold=cfg.train.threshold,
                      micro_batch_size=cfg.train.micro_batch_size)
    names = channel_names(net.config.out_channels)
    print(f"{args.split} split ({len(dataset)} samples):")
    print(format_metrics(report, names))
    out_csv = args.out or cfg.paths["metrics_csv"]
    Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_csv, report, names)
    return EXIT_OK


def _load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"image file {path} does not exist")
    if path.suffix == ".pgm":
        return (read_pgm(path).astype(np.float32) / 255.0)[None]
    tensors = read_otf(path)
    if "image" not in tensors:
        raise CheckpointError(f"{path} holds no tensor named 'image'")
    return tensors["image"]


def cmd_predict(args) -> int:
    net, _ = _build_net_from_checkpoint(args.checkpoint)
    image = _load_image(args.image)
    if image.ndim != 3 or image.shape[0] != 1:
        raise ShapeError(f"expected a (1, H, W) image, got shape {image.shape}")
    size = net.config.input_size
    if image.shape[1] != size or image.shape[2] != size:
        raise ShapeError(
            f"image is {image.shape[1]}x{image.shape[2]} but the checkpointed"
            f" model expects {size}x{size}"
        )
    with no_grad():
        out = net.forward(Tensor(image[None].astype(np.float32)))
        prob = sigmoid(out.main_logits).data[0]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_otf(out_dir / "prob.otf", {"prob": prob.astype(np.float32)})
    mask = binarize(prob, args.threshold).astype(np.float32)
    write_mask_pgm(out_dir / "mask.pgm", mask)
    print(f"wrote {out_dir / 'prob.otf'} and {out_dir / 'mask.pgm'}")
    return EXIT_OK


def _build_net_from_checkpoint(path):
    config, entries = load_checkpoint(path)
    net = OmegaNet(config, seed=0)
    extra = restore_parameters(net, entries)
    return net, extra


def cmd_verify(args) -> int:
    ok = verify.run_suite(args.suite)
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="omeganet",
        description="Dual-supervised small-object segmentation: data, training,"
                    " evaluation, prediction, and self-verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: paths.data_dir)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on the generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--lr", type=float, help="override the configured learning rate")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="checkpoint path (default: paths.checkpoint)")
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--out", help="metrics CSV path (default: paths.metrics_csv)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="segment one image with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help=".otf (tensor 'image') or .pgm input")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument("--suite", choices=("grad", "oracle", "shape", "all"), default="all")
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
