"""Command line entry points: train, discover, evaluate, ablate, serve, report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .discovery import METHOD_IDS
from .harness import (
    ALL_METRICS,
    ExperimentConfig,
    run_ablation,
    run_discover,
    run_evaluate,
    run_train,
)
from .protocol import MetricReport


def _load_config(path: str) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise SystemExit(f"config file not found: {path}")
    return ExperimentConfig.from_json_file(p)


def _parse_classes(text: str) -> list[int]:
    if not text.strip():
        raise SystemExit("usage error: class list must not be empty")
    return [int(c) for c in text.split(",")]


def cmd_train(args) -> int:
    config = _load_config(args.config)
    path = run_train(config, args.out)
    print(f"checkpoint written to {path}")
    return 0


def cmd_discover(args) -> int:
    config = _load_config(args.config)
    methods = args.methods.split(",")
    for m in methods:
        if m not in METHOD_IDS:
            raise SystemExit(f"unknown method {m!r}; choose from {','.join(METHOD_IDS)}")
    classes = _parse_classes(args.classes)
    path = run_discover(config, args.checkpoint, methods, classes, args.out)
    print(f"directions archive written to {path}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    metrics = tuple(args.metrics.split(",")) if args.metrics else ALL_METRICS
    text_path, json_path = run_evaluate(
        config,
        args.checkpoint,
        args.archive,
        backend_id=args.backend,
        metrics=metrics,
        out_dir=args.out,
    )
    print(Path(text_path).read_text())
    print(f"report written to {text_path} and {json_path}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    classes = _parse_classes(args.classes)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    path = run_ablation(config, args.checkpoint, classes, seeds=seeds, out_dir=args.out)
    print((path.parent / "ablation.txt").read_text())
    print(f"ablation written to {path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    ui_dir = args.ui if args.ui and Path(args.ui).is_dir() else None
    app = create_app(args.checkpoint, args.archive, ui_dir=ui_dir)
    if ui_dir:
        print(f"ui served at http://{args.host}:{args.port}/ui/")
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def cmd_report(args) -> int:
    report = MetricReport.from_json(Path(args.report).read_text())
    print(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentctl",
        description="Train a toy conditional generator, discover class-specific "
        "latent controls, evaluate them, and serve interactive edits.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train generator and segmenter from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("discover", help="write a directions archive for chosen methods")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--methods", default="ctrl_sis,random,ganspace,sefa")
    p.add_argument("--classes", required=True, help="comma-separated class ids")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("evaluate", help="score an archive against its checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--backend", default="features", choices=["features", "msssim"])
    p.add_argument("--metrics", default=None, help="comma-separated subset")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="rerun discovery with each loss term dropped")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seeds for medians")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="serve scenes and edits over HTTP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ui", default="frontend/dist", help="static UI directory to mount at /ui")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="pretty-print a stored report.json")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
