"""Command-line entry point: ``taft train | eval | gradcheck | render-episode``.

Reports go to stdout, diagnostics to stderr. Exit codes: 0 ok, 1 config or
flag error, 2 runtime/I-O error, 3 checkpoint version mismatch, 4 gradient
check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .errors import CheckpointError, ConfigError, TaftError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECKPOINT = 3
EXIT_GRADCHECK = 4

log = logging.getLogger("taft")


class _FlagError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _FlagError(message)


def _scales(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from exc
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError(f"scales must be positive, got {text!r}")
    return values


def _split_index(text: str) -> int:
    value = int(text)
    if not 0 <= value <= 3:
        raise argparse.ArgumentTypeError(f"split must be 0..3, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="taft", description="Task-adaptive feature transformer, desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="episodic meta-training")
    p.add_argument("--config", type=Path, help="JSON run config (defaults when omitted)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--episodes", type=int)
    p.add_argument("--split", type=_split_index)
    p.add_argument("--shots", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="episodic evaluation on a split's test classes")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", type=_split_index, required=True)
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--scales", type=_scales)
    p.add_argument("--episodes-per-class", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ridge", type=float)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dump-masks", type=Path)
    p.add_argument("--config", type=Path, help="JSON run config supplying eval defaults")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full episode loss")
    p.add_argument("--size", choices=["tiny"], default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=4, help="sampled coordinates per parameter tensor")

    p = sub.add_parser("render-episode", help="write one episode as PGM files plus a manifest")
    p.add_argument("--split", type=_split_index, required=True)
    p.add_argument("--phase", choices=["train", "test"], required=True)
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--queries", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--canvas", type=int, default=64)
    return parser


def _load_config(path: Path | None) -> RunConfig:
    return RunConfig.load(path) if path is not None else RunConfig()


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _load_config(args.config)
    overrides = {k: v for k, v in (("episodes", args.episodes), ("split", args.split), ("shots", args.shots),
                                   ("seed", args.seed)) if v is not None}
    cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides, "checkpoint_dir": str(args.out)}).resolved()
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.dump(args.out / "config.json")
    tc = cfg.train_config()
    state = train(tc, args.out, resume=args.resume, log_path=cfg.log_path)
    log.info("finished at episode %d; final checkpoint %s", state.episode_index, args.out / "final.taft")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate

    cfg = _load_config(args.config)
    if args.shots < 1:
        raise _FlagError("--shots must be >= 1")
    episodes = args.episodes_per_class if args.episodes_per_class is not None else cfg.episodes_per_class
    if episodes < 1:
        raise _FlagError("--episodes-per-class must be >= 1")
    report = evaluate(
        args.checkpoint, args.split, args.shots, episodes,
        scales=args.scales if args.scales is not None else cfg.scales,
        seed=args.seed if args.seed is not None else cfg.eval_seed,
        ridge=args.ridge if args.ridge is not None else cfg.ridge,
        canvas=cfg.canvas, queries=cfg.eval_queries, dump_masks=args.dump_masks, workers=args.workers,
    )
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    result = run_gradcheck(seed=args.seed, coords_per_param=args.coords)
    for group in ("encoder", "decoder", "references"):
        err = result.group_errors[group]
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{group:<12} max_rel_err={err:.3e}  worst={result.worst_param[group]}  {status}")
    status = "ok" if result.routed_reference_error < TOLERANCE else "FAIL"
    print(f"{'refs (L_R)':<12} max_rel_err={result.routed_reference_error:.3e}  {status}")
    if not result.passed:
        print(f"gradient check failed at {result.offender()}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_render_episode(args) -> int:
    from .episodes import SplitConfig, export_episode, sample_episode

    if args.shots < 1 or args.queries < 1:
        raise _FlagError("--shots and --queries must be >= 1")
    if args.canvas < 16 or args.canvas % 16:
        raise _FlagError("--canvas must be a positive multiple of 16")
    episode = sample_episode(SplitConfig(args.split), args.phase, args.shots, args.queries, args.seed,
                             canvas=args.canvas)
    extra = {"split": args.split, "phase": args.phase, "shots": args.shots, "queries": args.queries,
             "canvas": args.canvas}
    export_episode(episode, args.out, extra)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "render-episode": cmd_render_episode}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _FlagError as exc:
        print(f"taft: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (_FlagError, ConfigError) as exc:
        print(f"taft: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"taft: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TaftError, OSError) as exc:
        print(f"taft: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
