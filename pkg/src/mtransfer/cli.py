"""Command line: ``train``, ``stylize``, ``bench`` and ``export-weights``.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import run_bench
from .checkpoint import load_checkpoint
from .config import TrainConfig, load_config_file, resolve_config
from .errors import ConfigError, FormatError, ImageDecodeError, NumericError, ShapeError
from .imageio import load_tensor, save_tensor
from .network import N_LEVELS, ScalePlan, mt_forward
from .train import Trainer, ingest_dataset

log = logging.getLogger("mtransfer")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def write_manifest(path: Path, command: str, config: dict, seed: int, timings: dict, extra: dict | None = None) -> None:
    """JSON record of one run. Only ``timings`` and ``finished`` vary between identical invocations."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **(extra or {}),
        "timings": timings,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _manifest_path(output: Path) -> Path:
    return output.with_name(output.name + ".manifest.json")


def _config_dict(cfg: TrainConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in vars(cfg).items()}


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    explicit: dict = load_config_file(args.config) if args.config else {}
    overrides = {
        "iterations": args.iters,
        "lr": args.lr,
        "beta": args.beta,
        "lambdas": args.lambdas,
        "tiny": args.tiny,
        "seed": args.seed,
    }
    explicit.update({k: v for k, v in overrides.items() if v is not None})
    if args.style2 is not None:
        explicit.setdefault("style_assignment", "0,1,1")
    cfg = resolve_config(explicit)

    # every input is checked before the first iteration
    style_paths = [Path(args.style)] + ([Path(args.style2)] if args.style2 else [])
    for p in style_paths:
        if not p.is_file():
            raise FileNotFoundError(f"style image not found: {p}")
    if cfg.loss_weights and not Path(cfg.loss_weights).is_file():
        raise FileNotFoundError(f"loss-network weights not found: {cfg.loss_weights}")
    styles = [load_tensor(p) for p in style_paths]
    dataset = ingest_dataset(args.content_dir, cfg.min_dim, cfg.train_scales[1], cfg.seed, cfg.crop)

    output = Path(args.output)
    resume = load_checkpoint(args.resume) if args.resume else None
    t0 = time.perf_counter()
    trainer = Trainer(cfg, dataset, styles, resume=resume)
    t1 = time.perf_counter()
    log_path = output.with_suffix(".csv")

    def report(res):
        if res.iteration % 50 == 0 or res.iteration + 1 == cfg.iterations:
            levels = " ".join(f"{v:.4g}" for v in res.level_losses)
            log.info("iter %d lr %.4g L_H %.6g  L_S %s", res.iteration, res.lr, res.total, levels)

    trainer.run(checkpoint_path=output, log_path=log_path, on_step=report)
    t2 = time.perf_counter()
    write_manifest(
        _manifest_path(output),
        "train",
        _config_dict(cfg),
        cfg.seed,
        {"setup_s": t1 - t0, "train_s": t2 - t1},
        {
            "styles": [str(p) for p in style_paths],
            "content_dir": str(args.content_dir),
            "dataset_size": len(dataset),
            "checkpoint": str(output),
            "loss_log": str(log_path),
        },
    )
    print(f"wrote {output} (iteration {trainer.iteration})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# stylize


def _test_plan(ck, size: int | None) -> ScalePlan:
    return ScalePlan.test(ck.config.train_scales, final=size)


def cmd_stylize(args) -> int:
    if not 1 <= args.levels <= N_LEVELS:
        raise ConfigError(f"--levels must be in 1..{N_LEVELS}, got {args.levels}")
    t0 = time.perf_counter()
    ck = load_checkpoint(args.model)
    net = ck.network()
    plan = _test_plan(ck, args.size)
    x = load_tensor(args.input)
    t1 = time.perf_counter()
    stages: dict[str, float] = {}
    outputs = mt_forward(net, x, plan, args.levels, timings=stages)
    output = Path(args.output)
    save_tensor(outputs[-1], output)
    written = [str(output)]
    if args.emit_intermediate:
        for k, y in enumerate(outputs[:-1], start=1):
            p = output.with_name(f"{output.stem}_level{k}{output.suffix}")
            save_tensor(y, p)
            written.append(str(p))
    write_manifest(
        _manifest_path(output),
        "stylize",
        _config_dict(ck.config),
        ck.config.seed,
        {"load_s": t1 - t0, **stages},
        {"model": str(args.model), "input": str(args.input), "levels": args.levels, "sizes": list(plan.sizes), "outputs": written},
    )
    print("\n".join(written))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    if args.reps < 1:
        raise ConfigError(f"--reps must be >= 1, got {args.reps}")
    t0 = time.perf_counter()
    ck = load_checkpoint(args.model)
    net = ck.network()
    plan = _test_plan(ck, args.size)
    load_s = time.perf_counter() - t0
    report = run_bench(net, plan, args.reps, args.levels, seed=args.seed or 0)
    print(report.format())
    print(f"model load {load_s * 1e3:.1f} ms (excluded)")
    if args.output:
        write_manifest(
            Path(args.output),
            "bench",
            _config_dict(ck.config),
            ck.config.seed,
            {"load_s": load_s, **report.stage_means()},
            {"model": str(args.model), "report": report.as_dict()},
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-weights


def cmd_export(args) -> int:
    from .export import export_vgg19

    n = export_vgg19(args.input, args.output)
    print(f"wrote {n} conv layers to {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtransfer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--style", required=True, help="style image (all levels, or level 1 with --style2)")
    p.add_argument("--style2", help="second style image, used for levels 2 and 3")
    p.add_argument("--content-dir", required=True, help="directory of content images")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lambdas", help="comma separated level weights, e.g. 1,0.5,0.25")
    p.add_argument("--tiny", type=int, help="width/scale divisor for fast runs")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", default="model.mtck", help="checkpoint path (log and manifest go beside it)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stylize", help="stylize one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--levels", type=int, default=N_LEVELS)
    p.add_argument("--size", type=int, help="final output size (multiple of 4)")
    p.add_argument("--emit-intermediate", action="store_true", help="also write the lower-level outputs")
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("bench", help="time repeated stylizations")
    p.add_argument("--model", required=True)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--levels", type=int, default=N_LEVELS)
    p.add_argument("--size", type=int, help="final output size (multiple of 4)")
    p.add_argument("--seed", type=int, default=0, help="seed of the fixed random input")
    p.add_argument("--output", help="write the report as JSON here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-weights", help="convert VGG-19 weights (.npz/.pth) to the loss-network container")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (OSError, ImageDecodeError, FormatError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
