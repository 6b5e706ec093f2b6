"""``histf`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import FAMILIES, SyntheticDatasetSpec, generate_dataset, load_dataset, save_dataset, write_motion
from .errors import ConfigError, DataError, HistfError, NumericalError
from .model import load_checkpoint, param_count
from .pipeline import Generator, evaluate, format_report
from .train import CKPT_SUFFIX, Trainer, load_config

log = logging.getLogger("histf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _overrides(args) -> dict[str, str]:
    out = {}
    for key in ("seed",):
        if getattr(args, key, None) is not None:
            out[key] = str(getattr(args, key))
    for pair in getattr(args, "set", None) or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def cmd_gen_data(args) -> int:
    families = tuple(args.families.split(",")) if args.families else FAMILIES
    spec = SyntheticDatasetSpec(families=families, length_range=(args.min_frames, args.max_frames))
    if args.min_frames < 2 or args.max_frames < args.min_frames:
        raise ConfigError("frame range must satisfy 2 <= min <= max")
    motions = generate_dataset(spec, args.n, args.seed)
    out = save_dataset(motions, args.out)
    print(f"wrote {len(motions)} motions to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_config(args.config, _overrides(args))
    data_dir = args.data or run.data_dir
    out_dir = Path(args.out or run.out_dir)
    motions = load_dataset(data_dir)
    if args.resume:
        trainer = Trainer.resume(args.resume, motions)
    else:
        trainer = Trainer(run, motions)
    steps = args.steps if args.steps is not None else max(trainer.run.train_steps - trainer.step, 0)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(trainer.run.to_text())
    rows = trainer.fit(steps, log_path=out_dir / "train_log.csv", ckpt_dir=out_dir)
    final = trainer.save(out_dir / f"final{CKPT_SUFFIX}")
    if rows:
        print(f"step {rows[-1]['step']}: simple={rows[-1]['simple']:.6f} total={rows[-1]['total']:.6f}")
    print(f"checkpoint {final}")
    return EXIT_OK


def _check_config(args, generator: Generator) -> None:
    if args.config is None:
        return
    wanted = load_config(args.config).model
    if wanted != generator.model.cfg:
        raise ConfigError(
            f"config/skeleton mismatch: checkpoint has {generator.model.cfg}, config asks for {wanted}"
        )


def cmd_generate(args) -> int:
    generator, run = Generator.from_checkpoint(args.checkpoint)
    _check_config(args, generator)
    steps = args.steps if args.steps is not None else run.sample_steps
    guidance = args.guidance if args.guidance is not None else run.guidance
    seed = args.seed if args.seed is not None else run.seed
    frames = args.frames or run.n_frames
    motion = generator.motion(args.text, frames, steps, guidance, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_motion(out, motion)
    record = {"text": args.text, "steps": steps, "guidance": guidance, "seed": seed,
              "frames": frames, "checkpoint": args.checkpoint}
    out.with_suffix(".record").write_text("".join(f"{k} = {v}\n" for k, v in record.items()))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    overrides = _overrides(args)
    motions = load_dataset(args.data)
    generator = None
    if args.checkpoint:
        generator, run = Generator.from_checkpoint(args.checkpoint)
        if overrides:
            run = load_config(None, {**run.flat(), **overrides})
    else:
        if args.source == "generated":
            raise ConfigError("--source generated needs --checkpoint")
        run = load_config(args.config, overrides)
    seed = args.seed if args.seed is not None else run.eval_seed
    metrics = evaluate(motions, run, generator, args.source, seed, args.steps, args.guidance)
    header = {"source": args.source, "items": str(len(motions)), "seed": str(seed),
              "steps": str(args.steps if args.steps is not None else run.sample_steps),
              "guidance": str(args.guidance if args.guidance is not None else run.guidance)}
    report = format_report(metrics, header)
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        cfg, _, meta = load_checkpoint(args.checkpoint)
        flat = {**cfg.to_dict(), **meta}
    else:
        run = load_config(args.config, _overrides(args))
        cfg, flat = run.model, run.flat()
    print(f"N = {cfg.n_temporal}")
    print(f"L = {cfg.n_layers}")
    print(f"param_count = {param_count(cfg)}")
    for k, v in flat.items():
        print(f"{k} = {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histf", description="Text-to-motion diffusion with selective scans.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic toy-skeleton dataset")
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--families", help="comma-separated subset of " + ",".join(FAMILIES))
    g.add_argument("--min-frames", type=int, default=32)
    g.add_argument("--max-frames", type=int, default=32)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="number of steps to run (default: train_steps)")
    t.add_argument("--out", help="run directory for logs and checkpoints")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="sample one motion from a caption")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--guidance", type=float)
    s.add_argument("--frames", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="compute the metric report")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--source", choices=("generated", "real"), default="generated")
    e.add_argument("--seed", type=int)
    e.add_argument("--steps", type=int)
    e.add_argument("--guidance", type=float)
    e.add_argument("--out")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect", help="print the configuration and parameter count")
    i.add_argument("--config")
    i.add_argument("--checkpoint")
    i.add_argument("--set", action="append", metavar="KEY=VALUE")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except (ConfigError, HistfError, ValueError) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
