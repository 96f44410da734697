"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, config_hash, load_config, load_manifest, preset_model, validate_config

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
HELP_WIDTH = 88


@dataclass
class CommandResult:
    code: int
    summary: str
    report_path: Path | None = None


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; here 2 means a runtime failure
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _formatter(prog: str) -> argparse.HelpFormatter:
    # fixed width keeps --help output independent of the terminal
    return argparse.HelpFormatter(prog, width=HELP_WIDTH)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aimv2-kit", formatter_class=_formatter,
                     description="Desk-scale multimodal autoregressive vision pre-training toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("train", help="pre-train encoder and decoder", formatter_class=_formatter)
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--resume", metavar="CKPT", help="continue from this checkpoint")
    p.add_argument("--high-res-adapt", action="store_true",
                   help="adaptation stage: zero weight decay and the high-resolution input size")
    p.add_argument("--stop-at", type=int, metavar="STEP", help="stop after this many total steps")
    p.add_argument("--log", metavar="PATH", help="append per-step metrics as TSV")
    p.add_argument("--dump-patches", metavar="DIR", help="write the first batch's patch grids as PPM")

    p = sub.add_parser("probe", help="attentive probe on a frozen encoder", formatter_class=_formatter)
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--checkpoint", required=True, metavar="CKPT", help="trained checkpoint")
    p.add_argument("--report", metavar="PATH", help="JSON report path (default: next to the checkpoint)")

    p = sub.add_parser("grad-check", help="finite-difference check of the pre-training loss",
                       formatter_class=_formatter)
    p.add_argument("--preset", default="desk_tiny", help="model preset (default: %(default)s)")
    p.add_argument("--tol", type=float, default=1e-5, help="max relative error (default: %(default)g)")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds to check (default: %(default)s)")
    p.add_argument("--eps", type=float, default=1e-4, help="finite-difference step (default: %(default)g)")
    p.add_argument("--max-entries", type=int, default=24,
                   help="entries sampled per tensor, 0 for all (default: %(default)s)")

    p = sub.add_parser("plan-batches", help="draw native-resolution batch plans", formatter_class=_formatter)
    p.add_argument("--budget", type=int, required=True, metavar="C", help="patches per step, a power of two")
    p.add_argument("--draws", type=int, required=True, metavar="N", help="number of plans")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: %(default)s)")

    p = sub.add_parser("sample-mixture", help="draw sources from a dataset manifest",
                       formatter_class=_formatter)
    p.add_argument("--manifest", required=True, help="TOML file with [[sources]] entries")
    p.add_argument("--draws", type=int, required=True, metavar="N", help="number of draws")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: %(default)s)")
    return parser


def _configure_threads() -> None:
    raw = os.environ.get("AIMV2_KIT_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AIMV2_KIT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"AIMV2_KIT_THREADS must be a positive integer, got {raw!r}")
    import torch

    torch.set_num_threads(n)


def _load(path: str):
    cfg = load_config(path)
    validate_config(cfg)
    print(f"seed {cfg.seed} config {config_hash(cfg).hex()}")
    return cfg


def cmd_train(args) -> CommandResult:
    from .trainer import train

    cfg = _load(args.config)
    if args.stop_at is not None and args.stop_at < 0:
        raise ConfigError("--stop-at must be ≥ 0")
    t0 = time.perf_counter()
    records = train(cfg, resume=args.resume, high_res_adapt=args.high_res_adapt, stop_at=args.stop_at,
                    log_path=args.log, dump_patches=args.dump_patches)
    for rec in records:
        print(rec.line())
    last = records[-1] if records else None
    summary = (f"trained to step {last.step} total {last.total:.4f} in {time.perf_counter() - t0:.1f}s"
               if last else "nothing to do")
    return CommandResult(EXIT_OK, summary)


def cmd_probe(args) -> CommandResult:
    from .probe import probe_from_config, write_probe_report
    from .trainer import load_checkpoint, restore_state

    cfg = _load(args.config)
    state = restore_state(cfg, load_checkpoint(args.checkpoint))
    result = probe_from_config(state.model.encoder, cfg)
    for row in result.sweep:
        print(f"lr {row['lr']:g}\twd {row['weight_decay']:g}\ttrain {row['train_accuracy']:.4f}"
              f"\tval {row['val_accuracy']:.4f}")
    path = Path(args.report) if args.report else Path(args.checkpoint).with_suffix(".probe.json")
    write_probe_report(result, path, {"checkpoint": str(args.checkpoint), "step": state.step,
                                      "seed": cfg.seed, "config_hash": config_hash(cfg).hex()})
    summary = f"best lr {result.lr:g} wd {result.weight_decay:g} val accuracy {result.val_accuracy:.4f}"
    return CommandResult(EXIT_OK, summary, path)


def cmd_grad_check(args) -> CommandResult:
    from .objective import check_pretrain_gradients

    cfg = preset_model(args.preset)
    if args.seeds < 1:
        raise ConfigError("--seeds must be ≥ 1")
    if args.eps <= 0 or args.tol <= 0:
        raise ConfigError("--eps and --tol must be positive")
    worst = 0.0
    for seed in range(args.seeds):
        rep = check_pretrain_gradients(cfg, seed, eps=args.eps, tol=args.tol,
                                       max_entries=args.max_entries or None)
        worst = max(worst, rep.max_error)
        print(f"seed {seed}: max relative error {rep.max_error:.3e} ({rep.worst}), "
              f"{rep.checked_entries} entries")
    ok = worst < args.tol
    verdict = "PASS" if ok else "FAIL"
    print(f"{verdict} max relative error {worst:.3e} (tol {args.tol:g})")
    return CommandResult(EXIT_OK if ok else EXIT_RUNTIME, f"grad-check {verdict}")


def cmd_plan_batches(args) -> CommandResult:
    from .data import plan_native_batch

    if args.draws < 0:
        raise ConfigError("--draws must be ≥ 0")
    rng = np.random.default_rng(args.seed)
    print(f"seed {args.seed}")
    for _ in range(args.draws):
        try:
            plan = plan_native_batch(args.budget, rng)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        print(f"A={plan.area}\tB={plan.batch_size}\tn={plan.exponent}\tz={plan.z:.6f}")
    return CommandResult(EXIT_OK, f"{args.draws} plans for budget {args.budget}")


def cmd_sample_mixture(args) -> CommandResult:
    from .data import sample_source

    sources = load_manifest(args.manifest)
    if args.draws < 1:
        raise ConfigError("--draws must be ≥ 1")
    rng = np.random.default_rng(args.seed)
    print(f"seed {args.seed}")
    counts = Counter(sample_source(sources, rng, size=args.draws).tolist())
    for i, s in enumerate(sources):
        print(f"{s.name}\t{s.prob:g}\t{counts.get(i, 0) / args.draws:.6f}")
    return CommandResult(EXIT_OK, f"{args.draws} draws over {len(sources)} sources")


COMMANDS = {
    "train": cmd_train,
    "probe": cmd_probe,
    "grad-check": cmd_grad_check,
    "plan-batches": cmd_plan_batches,
    "sample-mixture": cmd_sample_mixture,
}


def run_cli(argv: Sequence[str] | None = None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return CommandResult(EXIT_INVALID, str(exc))
    except SystemExit as exc:  # --help
        return CommandResult(int(exc.code or 0), "")
    if args.command is None:
        return CommandResult(EXIT_INVALID, parser.format_help())
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _configure_threads()
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return CommandResult(EXIT_INVALID, f"error: {exc}")
    except Exception as exc:
        logging.getLogger(__name__).debug("command failed", exc_info=True)
        return CommandResult(EXIT_RUNTIME, f"error: {type(exc).__name__}: {exc}")


def main(argv: Sequence[str] | None = None) -> int:
    result = run_cli(argv)
    if result.summary:
        stream = sys.stdout if result.code == EXIT_OK else sys.stderr
        print(result.summary, file=stream)
    return result.code


if __name__ == "__main__":
    sys.exit(main())
