"""Command-line entry point: ``mlpscale <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, SweepConfig, parse_config_dict
from .model import ModelConfig, count_forward_flops, count_params, parse_notation
from .scaling import ERROR_FIELDS

log = logging.getLogger("mlpscale")


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3 or not all(p.isdigit() and int(p) > 0 for p in parts):
        raise argparse.ArgumentTypeError(f"expected HxWxC, got {text!r}")
    return tuple(int(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlpscale", description="MLP image classifiers and compute scaling fits.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    for name, helptext in [("train", "single run; mode taken from the config (default scratch)"),
                           ("pretrain", "pre-training run"),
                           ("finetune", "fine-tune a pretrained checkpoint"),
                           ("probe", "linear probe on frozen features of a checkpoint"),
                           ("sweep", "model x data-fraction x epoch grid, appended to runs.csv")]:
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True, help="JSON configuration file")
        s.add_argument("--output-dir", help="override output_dir from the config")

    s = sub.add_parser("fit-scaling", help="power-law fit of the Pareto frontier of a runs.csv")
    s.add_argument("--runs", required=True)
    s.add_argument("--error", default="upstream_err", choices=ERROR_FIELDS)
    s.add_argument("--out", default=None, help="output directory (default: next to the CSV)")
    s.add_argument("--alloc-epochs", type=int, default=None,
                   help="restrict the allocation fit to runs with this epoch count")

    s = sub.add_parser("visualize", help="first-layer filters of a checkpoint as a PGM")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--grid", type=int, default=5, help="tiles per side")
    s.add_argument("--out", default=None, help="PGM path (default: filters.pgm next to the checkpoint)")

    s = sub.add_parser("params", help="parameter and forward FLOP counts for B-L/Wi-m")
    s.add_argument("notation")
    s.add_argument("--image", type=_parse_shape, default=(64, 64, 3), help="HxWxC (default 64x64x3)")
    s.add_argument("--classes", type=int, default=1000)
    s.add_argument("--expansion", type=int, default=4)
    s.add_argument("--block-kind", default="inverted_bottleneck", choices=["standard", "inverted_bottleneck"])
    return p


def _load_config(args, mode: str | None):
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    if mode is not None:
        if data.get("mode", mode) != mode:
            raise ConfigError(f"mode: config says {data['mode']!r} but the subcommand is {mode!r}")
        data["mode"] = mode
    if args.output_dir:
        data["output_dir"] = args.output_dir
    return parse_config_dict(data)


def _cmd_run(args) -> int:
    from . import runner

    mode = {"train": None, "pretrain": "pretrain", "finetune": "finetune", "probe": "probe"}[args.command]
    cfg = _load_config(args, mode)
    if isinstance(cfg, SweepConfig):
        raise ConfigError("sweep configurations go to the 'sweep' subcommand")
    if cfg.mode in ("finetune", "probe"):
        result = runner.run_transfer(cfg)
    else:
        result = runner.run_training(cfg)
    print(json.dumps(result))
    return 0


def _cmd_sweep(args) -> int:
    from . import runner

    cfg = _load_config(args, None)
    if not isinstance(cfg, SweepConfig):
        raise ConfigError("sweep: configuration needs a 'sweep' section")
    status = runner.run_sweep(cfg)
    if status:
        print("some sweep cells failed; see the log", file=sys.stderr)
    return status


def _cmd_fit(args) -> int:
    from . import runner

    out = args.out or str(Path(args.runs).resolve().parent)
    result = runner.fit_scaling(args.runs, args.error, out, args.alloc_epochs)
    print(json.dumps(result, indent=2))
    return 0


def _cmd_visualize(args) -> int:
    from .report import export_pgm, filter_grid
    from .train import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    h, w, c = ck.model.config.image_shape
    grid = filter_grid(ck.model.params["emb.W"], h, w, tiles=args.grid, channels=c)
    out = args.out or str(Path(args.checkpoint).with_name("filters.pgm"))
    export_pgm(grid, out)
    print(out)
    return 0


def _cmd_params(args) -> int:
    depth, width = parse_notation(args.notation)
    cfg = ModelConfig(depth=depth, width=width, expansion=args.expansion, image_shape=args.image,
                      num_classes=args.classes, block_kind=args.block_kind)
    print(json.dumps({"model": cfg.notation, "params": count_params(cfg), "flops_fwd": count_forward_flops(cfg)}))
    return 0


_COMMANDS = {"train": _cmd_run, "pretrain": _cmd_run, "finetune": _cmd_run, "probe": _cmd_run,
             "sweep": _cmd_sweep, "fit-scaling": _cmd_fit, "visualize": _cmd_visualize, "params": _cmd_params}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
