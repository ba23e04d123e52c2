#!/usr/bin/env python3
"""
Surgical image enhancement agent - command line interface.
Synthesizes benchmarks, trains the prior, runs the pipeline and writes reports.
"""

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

from scopeagent.config import settings
from scopeagent.core.context import ContextConfig
from scopeagent.core.enhance import apply_plan, load_registry
from scopeagent.core.agent import select_models
from scopeagent.core.imagecore import (
    DatasetManifest,
    decode_label,
    load_image,
    load_manifest,
    save_image,
    save_manifest,
    scan_images,
)
from scopeagent.core.metrics import load_brisque, load_niqe
from scopeagent.core.prior import TrainingHyper, save_prior, train_prior
from scopeagent.core.synthesis import BenchmarkConfig, build_benchmark, load_sidecar
from scopeagent.pipeline import (
    ablation_sweep,
    emit_ablation_report,
    emit_report,
    evaluate_manifest,
    fit_quality_models,
    load_run_config,
    run_pipeline,
)
from scopeagent.utils import logger
from scopeagent.utils.error import ConfigError, ScopeAgentError, format_error


def _read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read {path}: {e}", details={"path": path})


def cmd_synth(args) -> int:
    base = Path(args.config).parent
    data = dict(_read_json(args.config))
    if args.source:
        data["source_manifest"] = str(Path(args.source).resolve())
    if args.seed is not None:
        data["seed"] = args.seed
    config = BenchmarkConfig.from_dict(data, base_dir=base)
    manifest = build_benchmark(config, args.out)
    print(f"Synthesized {len(manifest)} images into {args.out or config.output_dir or '.'}")
    return 0


def cmd_train_prior(args) -> int:
    manifest = load_manifest(args.manifest)
    defaults = TrainingHyper.defaults()
    hyper = TrainingHyper(
        learning_rate=args.lr if args.lr is not None else defaults.learning_rate,
        epochs=args.epochs if args.epochs is not None else defaults.epochs,
        l2=args.l2 if args.l2 is not None else defaults.l2,
        seed=args.seed,
    )
    model = train_prior(manifest, hyper, resize=args.resize)
    if args.temperature is not None:
        model = model.with_temperature(args.temperature)
    save_prior(model, args.out)
    if model.loss_history:
        print(f"Prior saved to {args.out} (final loss {model.loss_history[-1]:.4f})")
    else:
        print(f"Prior saved to {args.out} (untrained)")
    return 0


def cmd_run(args) -> int:
    config = load_run_config(args.config)
    summary = run_pipeline(config)
    emit_report(summary.run_dir)
    print(f"Run complete: {summary.records} records in {summary.run_dir} "
          f"({summary.backend_calls} backend calls)")
    return 0


def cmd_report(args) -> int:
    paths = []
    for run_dir in args.run:
        paths += emit_report(run_dir)
    if len(args.run) > 1:
        paths += emit_ablation_report(args.run, args.out or Path(args.run[0]).parent / "reports")
    for p in paths:
        print(p)
    return 0


def cmd_ablate(args) -> int:
    base = load_run_config(args.config)
    blocks = _read_json(args.contexts)
    if not isinstance(blocks, list):
        raise ConfigError("Contexts file must hold a JSON array of context configs")
    contexts = [ContextConfig.from_dict({"seed": base.context.seed, **block}) for block in blocks]
    result = ablation_sweep(base, contexts)
    for p in result.reports:
        print(p)
    return 0


def cmd_enhance(args) -> int:
    img = load_image(args.image, resize=args.resize)
    registry = load_registry(args.registry)
    plan = select_models(decode_label(args.label), registry)
    metadata = load_sidecar(Path(args.image)) if args.use_sidecar else None
    out, provenance = apply_plan(img, plan, registry, metadata)
    save_image(out, args.out)
    for step in provenance:
        print(f"{step['enhancer_id']}: {step['input_hash'][:12]} -> {step['output_hash'][:12]}")
    print(f"Enhanced image written to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    table = evaluate_manifest(
        manifest,
        enhanced_dir=args.enhanced,
        niqe_model=load_niqe(args.niqe) if args.niqe else None,
        brisque_model=load_brisque(args.brisque) if args.brisque else None,
        resize=args.resize,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(table.to_csv(), encoding="utf-8")
    print(f"Metrics for {len(table.rows)} rows written to {args.out}")
    return 0


def cmd_fit_quality(args) -> int:
    paths = fit_quality_models(load_manifest(args.manifest), args.out, args.patch_size, args.resize)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_index(args) -> int:
    out = Path(args.out)
    scanned = scan_images(args.dir, split=args.split)
    entries = tuple(
        dataclasses.replace(e, distorted_path=os.path.relpath(scanned.root / e.distorted_path, out.parent))
        for e in scanned
    )
    save_manifest(DatasetManifest(entries, root=out.parent), out)
    print(f"Indexed {len(entries)} images into {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scopeagent", description="Agentic surgical image enhancement")
    parser.add_argument("--log-level", default=None, help="Override the log level")
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Synthesize a distortion benchmark")
    p.add_argument("--source", help="Clean source manifest (overrides source_manifest)")
    p.add_argument("--config", required=True, help="Benchmark config JSON")
    p.add_argument("--out", help="Output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="Benchmark seed (overrides seed)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-prior", help="Train the prior model on a manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="Prior model JSON to write")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", "--learning-rate", dest="lr", type=float, help="Learning rate")
    p.add_argument("--l2", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resize", type=int)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("run", help="Run the pipeline and write its report")
    p.add_argument("--config", required=True, help="Run config JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="Write report tables for finished runs")
    p.add_argument("--run", required=True, action="append", help="Run directory (repeat for an ablation grid)")
    p.add_argument("--out", help="Directory of the ablation grid")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="Sweep few-shot context configs")
    p.add_argument("--config", required=True, help="Base run config JSON")
    p.add_argument("--contexts", required=True, help="JSON array of context configs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("enhance", help="Enhance one image for a given label")
    p.add_argument("--image", required=True)
    p.add_argument("--label", required=True, help='Label such as "smoke:severe+motion_blur:mild"')
    p.add_argument("--out", required=True)
    p.add_argument("--registry", help="Enhancer registry JSON")
    p.add_argument("--resize", type=int)
    p.add_argument("--use-sidecar", action="store_true", help="Read the blur angle from a synthesis sidecar")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="Per-image metric CSV for a manifest's test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="CSV file to write")
    p.add_argument("--enhanced", help="Directory of enhanced images named <id>.png")
    p.add_argument("--niqe", help="NIQE model JSON")
    p.add_argument("--brisque", help="BRISQUE model JSON")
    p.add_argument("--resize", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fit-quality", help="Fit the NIQE and BRISQUE models")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--resize", type=int)
    p.set_defaults(func=cmd_fit_quality)

    p = sub.add_parser("index", help="Build a source manifest from a directory of clean images")
    p.add_argument("--dir", required=True)
    p.add_argument("--out", required=True, help="Manifest JSON to write")
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.set_defaults(func=cmd_index)

    return parser


def main(argv=None) -> int:
    """Main entry point for the command line."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    if args.log_level:
        settings.log_level = args.log_level
        logger.set_level(args.log_level)
    if args.no_progress:
        settings.progress = False

    try:
        errors = settings.validate()
        if errors:
            raise ConfigError("Invalid settings", details=errors)
        return args.func(args)
    except ScopeAgentError as e:
        logger.error("Command failed", command=args.command, error=e.message)
        print(json.dumps(format_error(e), default=str), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
