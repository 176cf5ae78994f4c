"""Command-line entry points: synth | lr-find | train | eval | serve.

Exit codes: 0 success, 2 configuration/validation problems, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .data import BatchStream, gen_synthetic, load_manifest
from .errors import StagewiseError
from .metrics import evaluate, format_table
from .optim import lr_range_test, quadratic_selftest
from .plot import lr_curve_svg
from .trainer import ProtocolConfig, TrainingDiverged, run_protocol

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

log = logging.getLogger("stagewise")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagewise",
        description="Staged fine-tuning engine for residual convnets")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate the synthetic dataset")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--counts", default="250,250,250,25",
                       help="per-class totals, comma separated")
    synth.add_argument("--size", type=int, default=64, help="image edge length")
    synth.add_argument("--train-fraction", type=float, default=0.8)
    synth.add_argument("--gen-seed", type=int, default=0)

    lrfind = sub.add_parser("lr-find", help="run the LR range test")
    lrfind.add_argument("--config", help="protocol config JSON")
    lrfind.add_argument("--checkpoint", help="start from this checkpoint")
    lrfind.add_argument("--selftest", choices=["quadratic"],
                        help="run the scalar-quadratic oracle instead")
    lrfind.add_argument("--plot", help="write an SVG of the smoothed curve")
    lrfind.add_argument("--stage", type=int, default=0,
                        help="stage whose image size feeds the test")

    train = sub.add_parser("train", help="run the training protocol")
    train.add_argument("--config", required=True, help="protocol config JSON")
    mode = train.add_mutually_exclusive_group()
    mode.add_argument("--interactive", action="store_true",
                      help="park in awaiting_lr after each range test")
    mode.add_argument("--auto", action="store_true",
                      help="always take the automatic suggestion (default)")

    evalp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    evalp.add_argument("--checkpoint", required=True)
    evalp.add_argument("--manifest", required=True)
    evalp.add_argument("--image-size", type=int, default=64)
    evalp.add_argument("--batch-size", type=int, default=32)
    evalp.add_argument("--json-out", help="also write the report JSON here")

    serve = sub.add_parser("serve", help="serve the local HTTP API")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--frontend", help="static assets directory to mount")
    return parser


def cmd_synth(args) -> int:
    counts = tuple(int(c) for c in args.counts.split(","))
    manifest = gen_synthetic(counts, args.size, args.gen_seed, args.out,
                             train_fraction=args.train_fraction)
    print(json.dumps(manifest.counts(), indent=2, sort_keys=True))
    print(f"wrote {len(manifest.records)} images to {args.out}")
    return EXIT_OK


def cmd_lr_find(args) -> int:
    if args.selftest == "quadratic":
        curve = quadratic_selftest()
    else:
        if not args.config:
            print("lr-find: --config or --selftest required", file=sys.stderr)
            return EXIT_CONFIG
        config = ProtocolConfig.from_json(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.checkpoint:
            model = load_checkpoint(args.checkpoint).build_model()
        else:
            from .layers import build_resnet
            model = build_resnet(config.model)
        from .layers import assign_layer_groups
        assign_layer_groups(model, config.n_groups)
        manifest = load_manifest(config.manifest_path)
        plan = config.stages[args.stage]
        stream = BatchStream(manifest, "train", plan.image_size,
                             config.batch_size, seed=config.seed,
                             augment_policy=config.augment, stats=config.stats)
        curve = lr_range_test(model, stream.epoch(0), config.lr_find_config)
    print(json.dumps(curve.to_json_dict(), sort_keys=True))
    if args.plot:
        Path(args.plot).write_text(lr_curve_svg(curve))
        log.info("wrote %s", args.plot)
    return EXIT_OK


def cmd_train(args) -> int:
    config = ProtocolConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    model, state, ckpt = run_protocol(config, interactive=args.interactive)
    manifest = load_manifest(config.manifest_path)
    final_size = config.stages[-1].image_size
    report = evaluate(model, BatchStream(manifest, "test", final_size,
                                         config.batch_size,
                                         stats=config.stats))
    report_path = Path(config.checkpoint_dir) / "eval.json"
    report_path.write_text(json.dumps(report.to_json_dict(), sort_keys=True))
    print(format_table(report))
    print(f"checkpoint: {ckpt}")
    print(f"epochs completed: {state.epochs_completed}/{state.total_epochs}")
    return EXIT_OK


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.build_model()
    manifest = load_manifest(args.manifest)
    if len(manifest.class_names) != model.config.n_classes:
        print(f"eval: checkpoint head has {model.config.n_classes} classes "
              f"but manifest defines {len(manifest.class_names)}",
              file=sys.stderr)
        return EXIT_CONFIG
    stream = BatchStream(manifest, "test", args.image_size, args.batch_size)
    report = evaluate(model, stream)
    payload = json.dumps(report.to_json_dict(), sort_keys=True)
    if args.json_out:
        Path(args.json_out).write_text(payload)
    print(format_table(report))
    print(payload)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(frontend_dir=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "lr-find": cmd_lr_find,
        "train": cmd_train,
        "eval": cmd_eval,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (StagewiseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
