import json
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from groupnlu.data import ALPHA_MODES
from groupnlu.errors import ConfigError
from groupnlu.mtl_model import ArchitectureKind, ModelConfig
from groupnlu.training import PATIENCE_MODES, TrainSettings


@dataclass(frozen=True)
class EnvConfig:
    seed: Optional[int]
    data_dir: str
    log_level: str

    @classmethod
    def load(cls) -> "EnvConfig":
        load_dotenv()
        raw_seed = os.getenv("MTL_SEED", "").strip()
        try:
            seed = int(raw_seed) if raw_seed else None
        except ValueError as exc:
            raise ConfigError([("MTL_SEED", f"not an integer: {raw_seed!r}")]) from exc
        return cls(
            seed=seed,
            data_dir=os.getenv("MTL_DATA_DIR", "data"),
            log_level=os.getenv("MTL_LOG_LEVEL", "INFO").upper(),
        )


class TaskConfig(BaseModel):
    name: str = Field(min_length=1)
    train: str
    dev: Optional[str] = None
    test: Optional[str] = None
    group: Optional[str] = None
    format: str = "tsv"

    @field_validator("format")
    @classmethod
    def _known_format(cls, value: str) -> str:
        if value not in ("tsv", "goo"):
            raise ValueError("must be 'tsv' or 'goo'")
        return value

    @property
    def group_id(self) -> str:
        return self.group or self.name


class RunConfig(BaseModel):
    tasks: List[TaskConfig] = Field(min_length=1)
    architecture: str = ArchitectureKind.SINGLE_TASK.value
    embeddings: Optional[str] = None
    word_dim: int = Field(default=300, gt=0)
    char_dim: int = Field(default=100, gt=0)
    char_hidden: int = Field(default=64, gt=0)
    hidden: int = Field(default=128, gt=0)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    dropout_between_stages: bool = True
    freeze_word_embeddings: bool = False
    lambda_adv: float = Field(default=0.05, ge=0.0)
    gamma_ortho: float = Field(default=0.01, ge=0.0)
    w_sf: float = Field(default=1.0, ge=0.0)
    w_ic: float = Field(default=1.0, ge=0.0)
    alpha_mode: str = "inverse-size"
    lr: float = Field(default=0.001, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    clip_norm: Optional[float] = Field(default=5.0, ge=0.0)
    max_epochs: int = Field(default=50, ge=1)
    patience: int = Field(default=6, ge=1)
    patience_mode: str = "any"
    batch_size: int = Field(default=32, ge=1)
    unk_replace: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int = 0
    output_dir: str = "runs/latest"

    @field_validator("architecture")
    @classmethod
    def _known_architecture(cls, value: str) -> str:
        kinds = [kind.value for kind in ArchitectureKind]
        if value not in kinds:
            raise ValueError(f"must be one of {kinds}")
        return value

    @field_validator("alpha_mode")
    @classmethod
    def _known_alpha_mode(cls, value: str) -> str:
        if value not in ALPHA_MODES:
            raise ValueError(f"must be one of {list(ALPHA_MODES)}")
        return value

    @field_validator("patience_mode")
    @classmethod
    def _known_patience_mode(cls, value: str) -> str:
        if value not in PATIENCE_MODES:
            raise ValueError(f"must be one of {list(PATIENCE_MODES)}")
        return value

    @model_validator(mode="after")
    def _unique_task_names(self) -> "RunConfig":
        names = [task.name for task in self.tasks]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise ValueError(f"task names must be unique, repeated: {duplicates}")
        if self.architecture == ArchitectureKind.SINGLE_TASK.value:
            return self
        if self.kind.has_groups and not self.groups():
            raise ValueError(f"{self.architecture} needs at least one task group")
        return self

    @property
    def kind(self) -> ArchitectureKind:
        return ArchitectureKind(self.architecture)

    def groups(self) -> List[Tuple[str, List[str]]]:
        """Groups in first-appearance order, members in config order."""
        order: Dict[str, List[str]] = {}
        for task in self.tasks:
            order.setdefault(task.group_id, []).append(task.name)
        return list(order.items())

    def task(self, name: str) -> TaskConfig:
        for task in self.tasks:
            if task.name == name:
                return task
        raise KeyError(name)

    def build_model_config(self) -> ModelConfig:
        return ModelConfig(
            architecture=self.kind,
            word_dim=self.word_dim,
            char_dim=self.char_dim,
            char_hidden=self.char_hidden,
            hidden=self.hidden,
            dropout=self.dropout,
            dropout_between_stages=self.dropout_between_stages,
            freeze_word_embeddings=self.freeze_word_embeddings,
            lambda_adv=self.lambda_adv,
            gamma_ortho=self.gamma_ortho,
            w_sf=self.w_sf,
            w_ic=self.w_ic,
            seed=self.seed,
        )

    def build_train_settings(self) -> TrainSettings:
        return TrainSettings(
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            patience_mode=self.patience_mode,
            clip_norm=self.clip_norm or None,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            seed=self.seed,
            unk_replace=self.unk_replace,
        )


def parse_override(text: str) -> Tuple[str, Any]:
    """``key=value``; the value is read as JSON when it parses, else kept as a string."""
    if "=" not in text:
        raise ConfigError([(text, "override must look like key=value")])
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError([(text, "override has an empty key")])
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_override(payload: Dict[str, Any], key: str, value: Any) -> None:
    """Set a dotted key such as ``tasks.0.group`` in place."""
    parts = key.split(".")
    target: Any = payload
    for depth, part in enumerate(parts[:-1]):
        if isinstance(target, list):
            try:
                target = target[int(part)]
            except (ValueError, IndexError) as exc:
                raise ConfigError([(key, f"no list element {part!r}")]) from exc
        else:
            target = target.setdefault(part, {})
        if not isinstance(target, (dict, list)):
            raise ConfigError([(key, f"{'.'.join(parts[: depth + 1])} is not a mapping")])
    last = parts[-1]
    if isinstance(target, list):
        try:
            target[int(last)] = value
        except (ValueError, IndexError) as exc:
            raise ConfigError([(key, f"no list element {last!r}")]) from exc
    else:
        target[last] = value


def _format_loc(loc: Sequence[Any]) -> str:
    return ".".join(str(part) for part in loc) or "config"


def path_problems(config: RunConfig) -> List[Tuple[str, str]]:
    problems = []
    for idx, task in enumerate(config.tasks):
        for split in ("train", "dev", "test"):
            path = getattr(task, split)
            if path is None:
                continue
            exists = os.path.isdir(path) if task.format == "goo" else os.path.isfile(path)
            if not exists:
                problems.append((f"tasks.{idx}.{split}", f"{path} does not exist"))
    if config.embeddings is not None and not os.path.isfile(config.embeddings):
        problems.append(("embeddings", f"{config.embeddings} does not exist"))
    return problems


def validate_run_config(payload: Dict[str, Any], check_paths: bool = True) -> RunConfig:
    try:
        config = RunConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError([(_format_loc(err["loc"]), err["msg"]) for err in exc.errors()]) from exc
    if check_paths:
        problems = path_problems(config)
        if problems:
            raise ConfigError(problems)
    return config


def read_config_file(path: str) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise ConfigError([("config", f"{path} does not exist")])
    with open(path, "r", encoding="utf-8") as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError([("config", f"{path}:{exc.lineno}: {exc.msg}")]) from exc
    if not isinstance(payload, dict):
        raise ConfigError([("config", f"{path} must hold a JSON object")])
    return payload


def load_run_config(
    payload: Dict[str, Any],
    overrides: Sequence[Tuple[str, Any]] = (),
    env: Optional[EnvConfig] = None,
    check_paths: bool = True,
) -> RunConfig:
    """Layer CLI overrides over the file payload, with MTL_SEED as the seed fallback."""
    merged = json.loads(json.dumps(payload))
    if env is not None and env.seed is not None and "seed" not in merged:
        merged["seed"] = env.seed
    for key, value in overrides:
        apply_override(merged, key, value)
    return validate_run_config(merged, check_paths=check_paths)


def write_resolved(config: RunConfig, output_dir: str) -> str:
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, "config.resolved")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(config.model_dump(), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path
