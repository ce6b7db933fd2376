"""Command-line entry point orchestrating the experiment stages.

Exit codes: 0 success, 1 validation error, 2 missing artifact,
3 numerical failure.
"""

import argparse
import sys

from . import pipeline
from .config import ATTACK_NAMES, PipelineConfig, write_default_config
from .errors import (
    AttackError,
    ConfigError,
    DomainError,
    GraphShieldError,
    MissingArtifactError,
    NumericalError,
    ShapeError,
)

KIND_CHOICES = tuple(list(ATTACK_NAMES) + ["TOTAL"])


def build_parser():
    parser = argparse.ArgumentParser(
        prog="graphshield",
        description="Behavior-graph based evasion attack detection pipeline",
    )
    parser.add_argument(
        "--config", default="graphshield.json", help="path to the pipeline config file"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("init-config", help="write the default config file and exit")
    sub.add_parser("gen-data", help="generate the synthetic image dataset")
    sub.add_parser("train-target", help="train the target classifier")
    p = sub.add_parser("attack", help="generate adversarial pair sets")
    p.add_argument("--kind", choices=ATTACK_NAMES, help="single attack (default: all)")
    sub.add_parser("fit-spec", help="fit the specialization table")
    sub.add_parser("build-graphs", help="preprocess pairs into graph datasets")
    p = sub.add_parser("train-detector", help="train detectors on graph datasets")
    p.add_argument("--kind", choices=KIND_CHOICES, help="single detector (default: all)")
    p = sub.add_parser("evaluate", help="evaluate a trained detector")
    p.add_argument("--kind", choices=KIND_CHOICES, default="TOTAL")
    sub.add_parser("ablate", help="per-attribute ablation study")
    sub.add_parser("stats", help="attribute statistics report")
    sub.add_parser("correlations", help="attribute correlation report")
    p = sub.add_parser("export-graph", help="export one behavior graph as DOT")
    p.add_argument("--kind", choices=KIND_CHOICES, default="TOTAL")
    p.add_argument("--index", type=int, default=0)
    p.add_argument(
        "--channel",
        choices=("impact", "influence", "input-proportion", "specialization"),
        default="impact",
    )
    p.add_argument("--class", dest="cls", type=int, default=0)
    sub.add_parser("run-all", help="run every stage and write the summary")
    return parser


def run(args):
    if args.command == "init-config":
        write_default_config(args.config)
        print(f"wrote {args.config}")
        return
    cfg = PipelineConfig.from_file(args.config)
    if args.command == "gen-data":
        pipeline.gen_data(cfg)
    elif args.command == "train-target":
        pipeline.train_target(cfg)
    elif args.command == "attack":
        kinds = [args.kind] if args.kind else list(ATTACK_NAMES)
        for kind in kinds:
            pipeline.attack(cfg, kind)
    elif args.command == "fit-spec":
        pipeline.fit_spec(cfg)
    elif args.command == "build-graphs":
        pipeline.build_graphs(cfg)
    elif args.command == "train-detector":
        kinds = [args.kind] if args.kind else list(KIND_CHOICES)
        for kind in kinds:
            pipeline.train_detector_stage(cfg, kind)
    elif args.command == "evaluate":
        pipeline.evaluate_stage(cfg, args.kind)
    elif args.command == "ablate":
        pipeline.ablate_stage(cfg)
    elif args.command == "stats":
        pipeline.stats_stage(cfg)
    elif args.command == "correlations":
        pipeline.correlations_stage(cfg)
    elif args.command == "export-graph":
        pipeline.export_graph_stage(cfg, args.kind, args.index, args.channel, args.cls)
    elif args.command == "run-all":
        pipeline.run_all(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ShapeError, AttackError, DomainError, GraphShieldError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
