"""
cogsem command line.

Every command takes ``--config PATH``, ``--seed INT``, ``--out DIR`` and repeatable
``--set key.path=value`` overrides, validates the run configuration before doing any work and
writes its artifacts under ``{out}/{config_hash}/{seed}`` (``--out`` falls back to ``COGSEM_OUT``,
then ``runs``). Errors map to exit codes through ``CoGSEMError.exit_code``.

Commands:
- make-toy-dataset   synthetic shape categories as PNG + manifest
- build-owdataset    inject foreign noise images into a base manifest
- validate-owdataset check open-world invariants of a manifest
- score-difficulty   per-group DifficultyReport sidecars
- train --stage      one training stage (vqvae | prior | full)
- predict            saliency PNGs for every image of the evaluation manifest
- eval               MAE / S / E-max / F-max plus PR, ROC, F and E curves
- sample-prior       ancestral prior samples and their decoded images
- validate-config    schema and cross-field report, no side effects
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from dotenv import load_dotenv
from PIL import Image

from .config import (
    RunConfig,
    load_config,
    output_root,
    run_directory,
    validate_config,
    write_snapshot,
)
from .datamodel import load_groups, read_manifest, resolve_root, write_manifest
from .errors import CoGSEMError, ConfigError, DependencyError
from .gsem import score_group, write_difficulty_sidecar
from .lvgb import latent_shape
from .metrics import evaluate_dataset, write_eval_outputs
from .owdata import build_ow_dataset, preset, validate_ow_dataset
from .smart_logger import SmartLogger
from .synthetic import make_toy_dataset
from .training import (
    STAGE_DEPENDENCIES,
    build_model,
    load_checkpoint,
    load_model,
    predict_groups,
    resolve_checkpoint,
    restore_parts,
    run_stage,
    seed_everything,
)

LOG_CATEGORY = "CLI"


def _require(value: Optional[str], key: str) -> str:
    if not value:
        raise ConfigError(f"{key} is required for this command", [(key, "missing")])
    return value


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, default=str))


def _eval_manifest(config: RunConfig) -> str:
    return config.data.eval_manifest or _require(config.data.manifest, "data.manifest")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_make_toy_dataset(config: RunConfig, run_dir: Path, args) -> Dict[str, Any]:
    toy = config.toy
    manifest = make_toy_dataset(
        run_dir / "toy",
        categories=toy.categories,
        per_category=toy.per_category,
        image_size=toy.image_size,
        seed=config.seed,
    )
    return {"manifest": manifest}


def cmd_build_owdataset(config: RunConfig, run_dir: Path, args) -> Dict[str, Any]:
    ow = config.owdata
    base_path = _require(ow.base_manifest, "owdata.base_manifest")
    if ow.policy is None and ow.preset is None:
        raise ConfigError("build-owdataset needs a policy", [("owdata.preset", "missing")])
    policy = ow.policy or preset(ow.preset, seed=config.seed)
    base = read_manifest(base_path)
    out_dir = run_dir / "owdataset"
    manifest = build_ow_dataset(
        base, policy, resolve_root(base, base_path), out_dir, target_total=ow.target_total
    )
    path = write_manifest(manifest, out_dir / "manifest.json")
    report = validate_ow_dataset(manifest, resolve_root(manifest, path))
    (out_dir / "report.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return {"manifest": path, "total_noise": report.total_noise}


def cmd_validate_owdataset(config: RunConfig, run_dir: Path, args) -> Dict[str, Any]:
    manifest = read_manifest(args.manifest)
    report = validate_ow_dataset(manifest, resolve_root(manifest, args.manifest))
    path = run_dir / "owdataset_report.json"
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return {"report": path, "passed": report.passed, "total_noise": report.total_noise}


def cmd_score_difficulty(config: RunConfig, run_dir: Path, args) -> Dict[str, Any]:
    manifest = _require(config.data.manifest, "data.manifest")
    seed_everything(config.seed)
    model = build_model(config)
    try:
        restore_parts(
            model, load_checkpoint(resolve_checkpoint(config, run_dir, "full")), ("branch",)
        )
    except DependencyError:
        SmartLogger.log(
            "WARNING",
            "No full-stage checkpoint; scoring with an untrained backbone",
            category=LOG_CATEGORY,
            params={"run_dir": str(run_dir)},
        )
    model.eval()

    gsem = config.gsem
    out_dir = run_dir / "difficulty"
    written: List[Path] = []
    counters: Dict[str, int] = {}
    groups = load_groups(
        manifest,
        config.data.group_size,
        config.data.image_size,
        mode="train",
        seed=config.seed,
        workers=config.data.workers,
    )
    with torch.no_grad():
        for images, masks in groups:
            index = counters.get(images.category, 0)
            counters[images.category] = index + 1
            report = score_group(
                model.branch.backbone_features(images), masks, gsem.mu, normalize=gsem.normalize
            )
            path = out_dir / images.category / f"group-{index:03d}.json"
            written.append(write_difficulty_sidecar(report, images.ids, path))
    return {"sidecars": len(written), "out_dir": out_dir}


def cmd_train(config: RunConfig, run_dir: Path, args) -> Dict[str, Any]:
    stage = args.stage
    # prerequisite checkpoints before touching data
    for dependency, _ in STAGE_DEPENDENCIES[stage]:
        resolve_checkpoint(config, run_dir, dependency)
    manifest = _require(config.data.manifest, "data.manifest")
    groups = load_groups(
        manifest,
        config.data.group_size,
        config.data.image_size,
        mode="train",
        seed=config.seed,
        workers=config.data.workers,
    )
    checkpoint = run_stage(config, stage, groups, run_dir, progress=not args.quiet)
    return {"stage": stage, "checkpoint": checkpoint}


def cmd_predict(config: RunConfig, run_dir: Path, args) -> Dict[str, Any]:
    model = load_model(config, run_dir, "full")
    generator = seed_everything(config.seed)
    groups = load_groups(
        _eval_manifest(config),
        config.data.eval_group_size,
        config.data.image_size,
        mode="eval",
        seed=config.seed,
        workers=config.data.workers,
    )
    out_dir = run_dir / "predictions"
    written = predict_groups(model, groups, out_dir, generator=generator)
    return {"predictions": len(written), "out_dir": out_dir}


def cmd_eval(config: RunConfig, run_dir: Path, args) -> Dict[str, Any]:
    manifest_path = _eval_manifest(config)
    manifest = read_manifest(manifest_path)
    pred_dir = Path(config.metrics.pred_dir) if config.metrics.pred_dir else run_dir / "predictions"
    result, scores = evaluate_dataset(
        pred_dir,
        manifest,
        resolve_root(manifest, manifest_path),
        beta_sq=config.metrics.beta_sq,
        alpha=config.metrics.alpha,
        workers=config.metrics.workers,
    )
    paths = write_eval_outputs(result, scores, run_dir / "eval")
    return {"summary": result.summary(), **paths}


def cmd_sample_prior(config: RunConfig, run_dir: Path, args) -> Dict[str, Any]:
    model = load_model(config, run_dir, "prior")
    model.eval()
    generator = seed_everything(config.seed)
    with torch.no_grad():
        indices, images = model.lvgb.sample(
            config.model.prior.samples, latent_shape(config.data.image_size), generator=generator
        )
    out_dir = run_dir / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "indices.npy", indices.cpu().numpy().astype(np.int64))
    pixels = (images.clamp(0, 1).cpu().numpy() * 255.0).round().astype(np.uint8)
    for i, image in enumerate(pixels):
        Image.fromarray(image, mode="RGB").save(out_dir / f"sample-{i:03d}.png")
    return {"samples": len(pixels), "out_dir": out_dir}


COMMANDS = {
    "make-toy-dataset": cmd_make_toy_dataset,
    "build-owdataset": cmd_build_owdataset,
    "validate-owdataset": cmd_validate_owdataset,
    "score-difficulty": cmd_score_difficulty,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sample-prior": cmd_sample_prior,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="run configuration JSON")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out", default=None, help="output root (default: $COGSEM_OUT or ./runs)")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="flat config override, e.g. gsem.k=1 (repeatable)",
    )
    common.add_argument("--quiet", action="store_true", help="no progress bars")

    parser = argparse.ArgumentParser(
        prog="cogsem", description="Open-world co-salient object detection"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        if name not in ("train", "validate-owdataset"):
            sub.add_parser(name, parents=[common])
    train = sub.add_parser("train", parents=[common])
    train.add_argument("--stage", required=True, choices=["vqvae", "prior", "full"])
    validate_ow = sub.add_parser("validate-owdataset", parents=[common])
    validate_ow.add_argument("--manifest", required=True)
    sub.add_parser("validate-config", parents=[common])
    return parser


def _configure_logging(run_dir: Path) -> None:
    logs = run_dir / "logs"
    SmartLogger.configure(
        main_log_path=str(logs / "cogsem_flow.jsonl"),
        detail_log_dir=str(logs / "details"),
        blacklisted_log_path=str(logs / "cogsem_flow_blacklisted.jsonl"),
        file_output=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")

    try:
        if args.command == "validate-config":
            report = validate_config(args.config, overrides)
            _emit(report.to_dict())
            return 0 if report.ok else ConfigError.exit_code
        config = load_config(args.config, overrides)
        run_dir = run_directory(config, args.out)
        write_snapshot(config, run_dir)
        _configure_logging(run_dir)
        SmartLogger.log(
            "INFO",
            "Command started",
            category=LOG_CATEGORY,
            params={
                "command": args.command,
                "run_dir": str(run_dir),
                "out": str(output_root(args.out)),
            },
        )
        result = COMMANDS[args.command](config, run_dir, args)
    except CoGSEMError as e:
        SmartLogger.log(
            "ERROR",
            "Command failed",
            category=LOG_CATEGORY,
            params={"command": args.command, "category": e.category, "error": str(e)},
        )
        print(f"cogsem {args.command}: [{e.category}] {e}", file=sys.stderr)
        return e.exit_code

    _emit({"command": args.command, "run_dir": run_dir, **result})
    return 0


if __name__ == "__main__":
    sys.exit(main())
