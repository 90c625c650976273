"""Command-line entry point.

Verbs: train, eval, ablate, cost, make-corpus. Exit status is 0 on success,
1 for configuration errors and 2 for runtime failures. The compute device is
read from ``SELFCOLLAB_DEVICE`` (default ``cpu``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import VARIANTS, ConfigError, ExperimentConfig, load_config

log = logging.getLogger("selfcollab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config", "required")
    if not Path(args.config).is_file():
        raise ConfigError(args.config, "file not found")
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if getattr(args, "data", None):
        overrides["data.root"] = args.data
    return cfg.replace(**overrides) if overrides else cfg


def cmd_train(args) -> int:
    from .checkpoint import checkpoint_hash
    from .evaluate import MetricsRow, MetricsTable, evaluate_pairs, plot_round_curve
    from .imagecore import to_array
    from .trainer import TrainData, train

    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    result = train(cfg, resume=args.checkpoint, allow_config_mismatch=args.allow_config_mismatch)
    curve = result.round_curve()
    if curve:
        plot_round_curve(curve, out / "sc_curve.png")
    data = TrainData.from_config(cfg)
    if data.val:
        pairs = [(to_array(c), to_array(d)) for c, d in data.val]
        p, s, _ = evaluate_pairs(result.state.restorer, pairs, 1, result.state.device)
        table = MetricsTable()
        table.add(MetricsRow(Path(cfg.data.val_root).name, "final", p, s, len(pairs),
                             checkpoint_hash(result.final_checkpoint), cfg.hash()))
        table.save(out)
        print(table.to_text())
    print(f"final checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate_checkpoint
    from .trainer import default_device

    if not args.checkpoint or not args.data:
        raise ConfigError("eval", "--checkpoint and --data are required")
    table = evaluate_checkpoint(args.checkpoint, args.data, paired=not args.unpaired,
                                folds=args.folds, out_dir=args.out, device=default_device())
    if table.rows:
        print(table.to_text())
        if args.out:
            table.save(args.out)
    else:
        print(f"restorations written to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluate import run_ablation

    cfg = _load(args)
    variants = args.variant or cfg.variants
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError("--variant", f"unknown variant(s) {unknown}")
    table = run_ablation(cfg, variants)
    table.save(cfg.output_dir)
    print(table.to_text())
    return EXIT_OK


def cmd_cost(args) -> int:
    from . import costmodel as cm

    p = cm.CostParams(T0=args.T0, Ts=args.Ts, P0=args.P0, P_inf=1.0, N=args.folds or 8)
    bounds = cm.training_bounds(p)
    stage_costs = inference = None
    if args.config:
        import torch
        from .datapipe import sample_batch
        from .trainer import TrainData, init_state

        cfg = _load(args)
        data = TrainData.from_config(cfg)
        state = init_state(cfg)
        batch = sample_batch(data.train, cfg.data.batch_size, cfg.data.patch_size, cfg.seed)
        stage_costs = cm.measure_stage_costs(state, batch, folds=tuple(cfg.schedule.rebsc_folds))
        y = batch.degraded[:1].to(state.device)
        with torch.no_grad():
            inference = cm.measure_inference_ratios(state.restorer, y)
    print(cm.format_report(bounds, stage_costs, inference))
    return EXIT_OK


def cmd_make_corpus(args) -> int:
    from .datapipe import DegradationSpec, build_toy_dataset

    spec = _load(args).corpus if args.config else DegradationSpec()
    if not args.out:
        raise ConfigError("--out", "required")
    seed = args.seed if args.seed is not None else 0
    train, val = build_toy_dataset(args.out, spec, args.count, args.val_count, args.size, seed=seed)
    (Path(args.out) / "corpus.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))
    print(f"train: {train}\nval: {val}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfcollab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run the three training stages")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--data", help="override data.root")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--allow-config-mismatch", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a paired set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=1, help="self-ensemble size (1, 2, 4 or 8)")
    p.add_argument("--out")
    p.add_argument("--unpaired", action="store_true", help="only write restorations to --out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the basic stage of each variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", action="append", help="repeatable; default: config.variants")
    p.add_argument("--out")
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cost", help="symbolic cost bounds, optionally measured on a config")
    p.add_argument("--T0", type=float, default=100)
    p.add_argument("--Ts", type=float, default=8)
    p.add_argument("--P0", type=float, default=1.0)
    p.add_argument("--folds", type=int, default=8, help="self-ensemble size N")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("make-corpus", help="write a synthetic unpaired train set and paired val set")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="take the degradation recipe from this config")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--val-count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_make_corpus)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
