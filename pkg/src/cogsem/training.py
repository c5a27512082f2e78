"""
Three-stage training.

Key features:
- vqvae stage: encoder/decoder/codebook on single groups
- prior stage: code prior on the frozen VQ-VAE's index grids
- full stage: pairs of groups, GSEM exchange-masking per pair, BCE on the exchanged labels
- stage objective = l1*L_vqvae + l2*L_prior + l3*L_trans with exactly one active term
- checkpoints under ``{run}/stage-{name}/step-{k}/checkpoint.pt`` plus ``loss_history.csv``
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .config import STAGES, RunConfig, StageConfig
from .cosodtb import bce_loss
from .datamodel import ImageGroup, MaskGroup, save_saliency_png
from .errors import ContractError, DependencyError, LoadError, NumericError
from .gsem import score_group, select_exchange_mask
from .lvgb import prior_nll
from .model import PART_PREFIXES, CoGSEM
from .smart_logger import SmartLogger

LOG_CATEGORY = "TRAINING"

Group = Tuple[ImageGroup, MaskGroup]
Pair = Tuple[Group, Group]

CHECKPOINT_FILE = "checkpoint.pt"
LOSS_TERMS = ("vqvae", "prior", "trans")
# model parts each stage optimises (the full stage may add the prior)
STAGE_PARTS = {
    "vqvae": ("vqvae",),
    "prior": ("prior",),
    "full": ("branch", "decoder", "v_proj"),
}
# parts a stage restores from earlier stages
STAGE_DEPENDENCIES = {
    "vqvae": (),
    "prior": (("vqvae", ("vqvae",)),),
    "full": (("vqvae", ("vqvae",)), ("prior", ("prior",))),
}


@dataclass
class StepResult:
    loss: float
    components: Dict[str, float] = field(default_factory=dict)
    exchanged_ids: List[Tuple[str, str]] = field(default_factory=list)


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def pair_groups(
    groups: Sequence[Group], seed: int, count: Optional[int] = None
) -> Iterator[Pair]:
    """
    Uniformly random pairs of groups from two distinct categories.

    Yields ``count`` pairs, or forever when ``count`` is None.
    """
    by_category: Dict[str, List[Group]] = {}
    for group in groups:
        by_category.setdefault(group[0].category, []).append(group)
    categories = list(by_category)
    if len(categories) < 2:
        raise ContractError(f"pairing needs at least 2 categories, got {categories}")

    def _pairs() -> Iterator[Pair]:
        rng = np.random.default_rng(seed)
        drawn = 0
        while count is None or drawn < count:
            first, second = rng.choice(len(categories), size=2, replace=False)
            members1 = by_category[categories[int(first)]]
            members2 = by_category[categories[int(second)]]
            yield members1[int(rng.integers(len(members1)))], members2[int(rng.integers(len(members2)))]
            drawn += 1

    return _pairs()


def cycle_groups(groups: Sequence[Group], seed: int) -> Iterator[Group]:
    """Endless reshuffled passes over ``groups``."""
    if not groups:
        raise ContractError("no training groups")
    rng = np.random.default_rng(seed)
    while True:
        for i in rng.permutation(len(groups)):
            yield groups[int(i)]


# ---------------------------------------------------------------------------
# Losses and steps
# ---------------------------------------------------------------------------


def combined_loss(lambdas: Sequence[float], losses: Dict[str, torch.Tensor]) -> torch.Tensor:
    """Weighted sum of the stage losses; zero-weight terms are skipped entirely."""
    total = None
    for weight, term in zip(lambdas, LOSS_TERMS):
        if weight == 0:
            continue
        if term not in losses:
            raise ContractError(f"loss term {term!r} has weight {weight} but was not computed")
        value = losses[term] if weight == 1 else weight * losses[term]
        total = value if total is None else total + value
    if total is None:
        raise ContractError("all stage lambdas are zero")
    return total


def configure_trainable(
    model: CoGSEM, stage: str, unfreeze_prior: bool = False
) -> List[torch.nn.Parameter]:
    """Freeze everything, then unfreeze the parts the stage optimises."""
    if stage not in STAGE_PARTS:
        raise ContractError(f"unknown stage {stage!r}")
    parts = STAGE_PARTS[stage] + (("prior",) if stage == "full" and unfreeze_prior else ())
    for param in model.parameters():
        param.requires_grad_(False)
    trainable: List[torch.nn.Parameter] = []
    for part in parts:
        for param in model.parameters_of(part):
            param.requires_grad_(True)
            trainable.append(param)
    return trainable


def _check_stage(stage: StageConfig, expected: str) -> None:
    if stage.stage != expected:
        raise ContractError(f"step for stage {expected!r} called with stage {stage.stage!r}")


def _finish(optimizer: torch.optim.Optimizer, total: torch.Tensor) -> None:
    if not bool(torch.isfinite(total)):
        raise NumericError(f"non-finite training loss {total.detach().item()}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()


def train_step_vqvae(
    group: Group,
    model: CoGSEM,
    stage: StageConfig,
    optimizer: torch.optim.Optimizer,
    generator: Optional[torch.Generator] = None,
) -> StepResult:
    _check_stage(stage, "vqvae")
    images, _ = group
    loss, components, grid = model.lvgb.loss(images)
    total = combined_loss(stage.lambdas, {"vqvae": loss})
    _finish(optimizer, total)
    if model.config.vq.reinit_dead_codes:
        model.lvgb.codebook.reinit_dead_codes(grid.continuous, grid.indices, generator)
    return StepResult(
        loss=total.detach().item(),
        components={k: v.detach().item() for k, v in components.items()},
    )


def train_step_prior(
    group: Group,
    model: CoGSEM,
    stage: StageConfig,
    optimizer: torch.optim.Optimizer,
) -> StepResult:
    _check_stage(stage, "prior")
    images, _ = group
    with torch.no_grad():
        indices = model.lvgb.quantize(model.lvgb.encode(images)).indices
    nll = prior_nll(indices, model.lvgb.prior)
    total = combined_loss(stage.lambdas, {"prior": nll})
    _finish(optimizer, total)
    return StepResult(loss=total.detach().item(), components={"prior_nll": nll.detach().item()})


def exchange(pair: Pair, model: CoGSEM, stage: StageConfig, generator=None):
    """Inner maximisation: score both groups with the current backbone and swap the hardest."""
    gsem = stage.gsem
    if gsem is None or gsem.k == 0:
        return None
    with torch.no_grad():
        reports = None
        if gsem.selection == "difficulty":
            reports = tuple(
                score_group(
                    model.branch.backbone_features(images), masks, gsem.mu, normalize=gsem.normalize
                )
                for images, masks in pair
            )
    return select_exchange_mask(
        pair[0],
        pair[1],
        reports,
        gsem.k,
        hardness_order=gsem.hardness_order,
        selection=gsem.selection,
        generator=generator,
    )


def train_step_full(
    pair: Pair,
    model: CoGSEM,
    stage: StageConfig,
    optimizer: torch.optim.Optimizer,
    generator: Optional[torch.Generator] = None,
) -> StepResult:
    """GSEM on the pair, forward both groups, BCE on the exchanged labels, one update."""
    _check_stage(stage, "full")
    result = exchange(pair, model, stage, generator)
    (images1, masks1), (images2, masks2) = pair if result is None else (result.group1, result.group2)

    pred = torch.cat([model(images1, generator=generator), model(images2, generator=generator)])
    target = torch.cat([masks1.masks, masks2.masks]).to(pred.device)
    trans = bce_loss(pred, target)
    losses = {"trans": trans}
    if stage.unfreeze_prior:
        # the prior keeps its own objective while it fine-tunes
        with torch.no_grad():
            latents = model.lvgb.encode(torch.cat([images1.images, images2.images]))
            indices = model.lvgb.quantize(latents).indices
        losses["prior"] = prior_nll(indices, model.lvgb.prior)
    total = combined_loss(stage.lambdas, losses)
    if stage.unfreeze_prior:
        total = total + losses["prior"]
    _finish(optimizer, total)
    return StepResult(
        loss=total.detach().item(),
        components={k: v.detach().item() for k, v in losses.items()},
        exchanged_ids=[] if result is None else result.exchanged_ids,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def stage_directory(run_dir: Path, stage: str) -> Path:
    return Path(run_dir) / f"stage-{stage}"


def checkpoint_path(run_dir: Path, stage: str, step: int) -> Path:
    return stage_directory(run_dir, stage) / f"step-{step}" / CHECKPOINT_FILE


def save_checkpoint(
    model: CoGSEM,
    path: Path,
    stage: str,
    step: int,
    config: RunConfig,
    history: Sequence[Dict[str, float]] = (),
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save(
        {
            "state_dict": state,
            "shapes": {k: list(v.shape) for k, v in state.items()},
            "config": config.model_dump(mode="json"),
            "stage": stage,
            "step": step,
            "history": list(history),
        },
        path,
    )
    return path


def load_checkpoint(path: Path) -> Dict:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"checkpoint not found: {path}", path=str(path))
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise LoadError(f"cannot read checkpoint {path}: {e}", path=str(path)) from e


def latest_checkpoint(run_dir: Path, stage: str) -> Optional[Path]:
    directory = stage_directory(run_dir, stage)
    if not directory.is_dir():
        return None
    steps = []
    for child in directory.glob("step-*"):
        suffix = child.name[len("step-"):]
        if suffix.isdigit() and (child / CHECKPOINT_FILE).is_file():
            steps.append(int(suffix))
    return checkpoint_path(run_dir, stage, max(steps)) if steps else None


def resolve_checkpoint(config: RunConfig, run_dir: Path, stage: str) -> Path:
    explicit = getattr(config.checkpoints, stage)
    path = Path(explicit) if explicit else latest_checkpoint(run_dir, stage)
    if path is None or not path.is_file():
        raise DependencyError(
            f"stage {stage!r} checkpoint missing (looked for {explicit or stage_directory(run_dir, stage)})"
        )
    return path


def restore_parts(model: CoGSEM, checkpoint: Dict, parts: Sequence[str]) -> None:
    prefixes = tuple(p for part in parts for p in PART_PREFIXES[part])
    state = {k: v for k, v in checkpoint["state_dict"].items() if k.startswith(prefixes)}
    own = model.state_dict()
    for name, value in state.items():
        if name not in own or tuple(own[name].shape) != tuple(value.shape):
            raise LoadError(f"checkpoint tensor {name} does not fit the configured model")
    model.load_state_dict(state, strict=False)


def build_model(config: RunConfig) -> CoGSEM:
    return CoGSEM(config.model, config.data.image_size)


def load_model(config: RunConfig, run_dir: Path, stage: str = "full") -> CoGSEM:
    """Model restored from the latest (or configured) checkpoint of ``stage``."""
    model = build_model(config)
    checkpoint = load_checkpoint(resolve_checkpoint(config, run_dir, stage))
    model.load_state_dict(checkpoint["state_dict"])
    return model


def write_loss_history(history: Sequence[Dict[str, float]], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = ["step", "loss"] + sorted({k for row in history for k in row} - {"step", "loss"})
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for row in history:
            writer.writerow(row)
    return path


# ---------------------------------------------------------------------------
# Stage driver
# ---------------------------------------------------------------------------


def run_stage(
    config: RunConfig,
    stage_name: str,
    groups: Sequence[Group],
    run_dir: Path,
    progress: bool = True,
) -> Path:
    """Train one stage and return its final checkpoint path."""
    if stage_name not in STAGES:
        raise ContractError(f"unknown stage {stage_name!r}")
    stage = config.stage(stage_name)
    run_dir = Path(run_dir)

    # resolve prerequisites before any work
    dependencies = [
        (load_checkpoint(resolve_checkpoint(config, run_dir, dep)), parts)
        for dep, parts in STAGE_DEPENDENCIES[stage_name]
    ]

    generator = seed_everything(stage.seed)
    model = build_model(config)
    for checkpoint, parts in dependencies:
        restore_parts(model, checkpoint, parts)
    trainable = configure_trainable(model, stage_name, stage.unfreeze_prior)
    optimizer = torch.optim.Adam(trainable, lr=stage.optimizer.lr, betas=stage.optimizer.betas)
    model.train()

    SmartLogger.log(
        "INFO",
        "Training stage started",
        category=LOG_CATEGORY,
        params={
            "stage": stage_name,
            "steps": stage.steps,
            "groups": len(groups),
            "trainable": sum(p.numel() for p in trainable),
            "run_dir": str(run_dir),
        },
    )

    if stage_name == "full":
        batches = pair_groups(groups, stage.seed)
        step_fn = lambda batch: train_step_full(batch, model, stage, optimizer, generator)
    elif stage_name == "prior":
        batches = cycle_groups(groups, stage.seed)
        step_fn = lambda batch: train_step_prior(batch, model, stage, optimizer)
    else:
        batches = cycle_groups(groups, stage.seed)
        step_fn = lambda batch: train_step_vqvae(batch, model, stage, optimizer, generator)

    history: List[Dict[str, float]] = []
    last_saved = None
    try:
        for step in tqdm(range(1, stage.steps + 1), desc=f"stage {stage_name}", disable=not progress):
            result = step_fn(next(batches))
            history.append({"step": step, "loss": result.loss, **result.components})
            if step % stage.log_every == 0:
                SmartLogger.log(
                    "INFO",
                    "Training progress",
                    category=LOG_CATEGORY,
                    params={"stage": stage_name, "step": step, "loss": result.loss, **result.components},
                )
            if stage.checkpoint_every and step % stage.checkpoint_every == 0:
                last_saved = save_checkpoint(
                    model, checkpoint_path(run_dir, stage_name, step), stage_name, step, config, history
                )
    except Exception as e:
        SmartLogger.log(
            "ERROR",
            "Training stage failed",
            category=LOG_CATEGORY,
            params={"stage": stage_name, "step": len(history) + 1, "error": str(e)},
        )
        raise

    final = checkpoint_path(run_dir, stage_name, stage.steps)
    if last_saved != final:
        save_checkpoint(model, final, stage_name, stage.steps, config, history)
    write_loss_history(history, stage_directory(run_dir, stage_name) / "loss_history.csv")
    SmartLogger.log(
        "INFO",
        "Training stage finished",
        category=LOG_CATEGORY,
        params={
            "stage": stage_name,
            "checkpoint": str(final),
            "final_loss": history[-1]["loss"] if history else None,
        },
    )
    return final


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def predict_groups(
    model: CoGSEM,
    groups: Sequence[Group],
    out_dir: Path,
    generator: Optional[torch.Generator] = None,
) -> List[Path]:
    """Write one saliency PNG per non-padding image id as ``{out_dir}/{id}.png``."""
    model.eval()
    out_dir = Path(out_dir)
    written: List[Path] = []
    for images, _ in groups:
        for saliency in model.predict(images, generator=generator):
            if images.is_padding(saliency.id):
                continue
            written.append(save_saliency_png(saliency.values, out_dir / f"{saliency.id}.png"))
    SmartLogger.log(
        "INFO",
        "Predictions written",
        category=LOG_CATEGORY,
        params={"out_dir": str(out_dir), "count": len(written)},
    )
    return written
