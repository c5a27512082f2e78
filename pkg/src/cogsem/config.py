"""
Run configuration.

One JSON document per run, validated by pydantic with unknown keys rejected at every level.
Key features:
- per-module sections (data, model, gsem, train stages, checkpoints, metrics, owdata)
- flat ``key.path=value`` overrides applied before validation
- cross-field checks reported with their key paths
- a config hash (seed excluded) naming the run directory ``{out}/{hash}/{seed}``
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, LoadError
from .owdata import NoisePolicy

LOG_CATEGORY = "CONFIG"

DEFAULT_OUT = "runs"
STAGES = ("vqvae", "prior", "full")
STAGE_LAMBDAS = {
    "vqvae": (1.0, 0.0, 0.0),
    "prior": (0.0, 1.0, 0.0),
    "full": (0.0, 0.0, 1.0),
}
StageName = Literal["vqvae", "prior", "full"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    manifest: Optional[str] = None
    eval_manifest: Optional[str] = None
    image_size: int = Field(224, ge=16)
    group_size: int = Field(5, ge=2)
    # None evaluates each category as one group
    eval_group_size: Optional[int] = Field(None, ge=2)
    workers: int = Field(0, ge=0)

    @field_validator("image_size")
    @classmethod
    def _stride_aligned(cls, value: int) -> int:
        if value % 16:
            raise ValueError("image_size must be a multiple of 16")
        return value


class VQConfig(_Section):
    num_embeddings: int = Field(128, ge=2)
    embedding_dim: int = Field(384, ge=1)
    hidden_channels: int = Field(64, ge=4)
    n_residual_blocks: int = Field(2, ge=0)
    v_channels: int = Field(64, ge=1)
    commitment: float = Field(0.25, ge=0.0)
    reinit_dead_codes: bool = False


class PriorConfig(_Section):
    hidden_channels: int = Field(64, ge=2)
    n_layers: int = Field(4, ge=1)
    kernel_size: int = Field(3, ge=3)
    use_attention: bool = False
    attention_heads: int = Field(4, ge=1)
    temperature: float = Field(1.0, gt=0.0)
    samples: int = Field(4, ge=1)

    @field_validator("kernel_size")
    @classmethod
    def _odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return value


class BranchConfig(_Section):
    embed_dim: int = Field(64, ge=8)
    depth: int = Field(2, ge=1)
    token_depth: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(2.0, gt=0.0)
    decoder_depth: int = Field(1, ge=1)
    use_lvgb: bool = True
    train_v_source: Literal["reconstruction", "resampled"] = "reconstruction"
    test_v_source: Literal["reconstruction", "resampled"] = "resampled"

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        return self


class ModelConfig(_Section):
    vq: VQConfig = Field(default_factory=VQConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    branch: BranchConfig = Field(default_factory=BranchConfig)


class GSEMConfig(_Section):
    # k=0 turns exchange-masking off
    k: int = Field(1, ge=0)
    mu: float = 0.5
    hardness_order: Literal["low", "high"] = "low"
    normalize: bool = True
    selection: Literal["difficulty", "random"] = "difficulty"


class OptimizerConfig(_Section):
    name: Literal["adam"] = "adam"
    lr: float = Field(1e-4, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)


class StageConfig(_Section):
    stage: StageName
    lambdas: Optional[Tuple[float, float, float]] = None
    steps: int = Field(100, ge=0)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    seed: Optional[int] = None
    gsem: Optional[GSEMConfig] = None
    unfreeze_prior: bool = False
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(0, ge=0)

    @field_validator("lambdas")
    @classmethod
    def _one_hot(cls, value):
        if value is not None and sorted(value) != [0.0, 0.0, 1.0]:
            raise ValueError(f"lambdas must be one-hot, got {list(value)}")
        return value

    @model_validator(mode="after")
    def _lambdas_match_stage(self):
        expected = STAGE_LAMBDAS[self.stage]
        if self.lambdas is None:
            self.lambdas = expected
        elif tuple(self.lambdas) != expected:
            raise ValueError(f"stage {self.stage!r} needs lambdas {list(expected)}")
        return self


class TrainConfig(_Section):
    vqvae: StageConfig = Field(default_factory=lambda: StageConfig(stage="vqvae"))
    prior: StageConfig = Field(default_factory=lambda: StageConfig(stage="prior"))
    full: StageConfig = Field(default_factory=lambda: StageConfig(stage="full"))

    @model_validator(mode="before")
    @classmethod
    def _default_stage_names(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            for name in STAGES:
                block = data.get(name)
                if isinstance(block, dict) and "stage" not in block:
                    data[name] = {**block, "stage": name}
        return data

    @model_validator(mode="after")
    def _stage_keys(self):
        for name in STAGES:
            if getattr(self, name).stage != name:
                raise ValueError(f"train.{name} declares stage {getattr(self, name).stage!r}")
        return self


class CheckpointConfig(_Section):
    """Explicit checkpoint files; unset entries resolve to the latest step in the run directory."""

    vqvae: Optional[str] = None
    prior: Optional[str] = None
    full: Optional[str] = None


class MetricsConfig(_Section):
    beta_sq: float = Field(0.3, gt=0.0)
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    pred_dir: Optional[str] = None
    workers: int = Field(0, ge=0)


class OWDataConfig(_Section):
    base_manifest: Optional[str] = None
    preset: Optional[Literal["owcosal", "owcosod", "owcoca"]] = "owcosal"
    policy: Optional[NoisePolicy] = None
    target_total: Optional[int] = Field(None, ge=0)


class ToyDataConfig(_Section):
    categories: int = Field(2, ge=2)
    per_category: int = Field(20, ge=2)
    image_size: int = Field(64, ge=16)


class RunConfig(_Section):
    seed: int = 0
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    gsem: GSEMConfig = Field(default_factory=GSEMConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    checkpoints: CheckpointConfig = Field(default_factory=CheckpointConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    owdata: OWDataConfig = Field(default_factory=OWDataConfig)
    toy: ToyDataConfig = Field(default_factory=ToyDataConfig)

    def stage(self, name: StageName) -> StageConfig:
        """Stage block with its seed and GSEM settings filled from the top level."""
        block = getattr(self.train, name)
        return block.model_copy(
            update={
                "seed": self.seed if block.seed is None else block.seed,
                "gsem": block.gsem or self.gsem,
            }
        )


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``key.path=value`` overrides; values parse as JSON when they can."""
    document = json.loads(json.dumps(document))
    issues = []
    for override in overrides:
        key, sep, raw = override.partition("=")
        if not sep or not key:
            issues.append((override, "override must look like key.path=value"))
            continue
        parts = key.split(".")
        node = document
        for depth, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                issues.append((".".join(parts[: depth + 1]), "is not a section"))
                break
            node = child
        else:
            node[parts[-1]] = _parse_value(raw)
    if issues:
        raise ConfigError("invalid overrides", issues)
    return document


def _schema_issues(error: ValidationError) -> List[Tuple[str, str]]:
    return [(".".join(str(p) for p in err["loc"]), err["msg"]) for err in error.errors()]


def cross_field_issues(config: RunConfig, check_paths: bool = True) -> List[Tuple[str, str]]:
    issues: List[Tuple[str, str]] = []
    n = config.data.group_size
    for key, gsem in [("gsem", config.gsem)] + [
        (f"train.{name}.gsem", getattr(config.train, name).gsem) for name in STAGES
    ]:
        if gsem is not None and gsem.k > 0 and 2 * gsem.k >= n:
            issues.append((f"{key}.k", f"k={gsem.k} must stay below group_size/2 (group_size={n})"))
    if check_paths:
        for name in STAGES:
            path = getattr(config.checkpoints, name)
            if path is not None and not Path(path).is_file():
                issues.append((f"checkpoints.{name}", f"checkpoint not found: {path}"))
        for key, path in (
            ("data.manifest", config.data.manifest),
            ("data.eval_manifest", config.data.eval_manifest),
            ("owdata.base_manifest", config.owdata.base_manifest),
        ):
            if path is not None and not Path(path).is_file():
                issues.append((key, f"manifest not found: {path}"))
    return issues


def read_document(path: Optional[Union[str, Path]]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"config not found: {path}", path=str(path))
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON", [("", str(e))]) from e
    if not isinstance(document, dict):
        raise ConfigError(f"config {path} must hold a JSON object", [("", "not an object")])
    return document


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    check_paths: bool = True,
) -> RunConfig:
    document = apply_overrides(read_document(path), overrides)
    try:
        config = RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError("config failed schema validation", _schema_issues(e)) from e
    issues = cross_field_issues(config, check_paths=check_paths)
    if issues:
        raise ConfigError("config failed cross-field validation", issues)
    return config


@dataclass
class ValidationReport:
    ok: bool
    issues: List[Tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"ok": self.ok, "issues": [{"key": k, "message": m} for k, m in self.issues]}


def validate_config(
    path: Optional[Union[str, Path]], overrides: Sequence[str] = ()
) -> ValidationReport:
    """Schema and cross-field checks without side effects."""
    try:
        load_config(path, overrides)
    except ConfigError as e:
        return ValidationReport(ok=False, issues=e.issues)
    return ValidationReport(ok=True)


def config_hash(config: RunConfig) -> str:
    payload = config.model_dump(mode="json", exclude={"seed"})
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def output_root(out: Optional[Union[str, Path]] = None) -> Path:
    return Path(out or os.environ.get("COGSEM_OUT") or DEFAULT_OUT)


def run_directory(config: RunConfig, out: Optional[Union[str, Path]] = None) -> Path:
    return output_root(out) / config_hash(config) / str(config.seed)


def write_snapshot(config: RunConfig, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path
