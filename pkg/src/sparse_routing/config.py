"""JSON run configuration (schema_version 1).

Four sections, all optional, unknown keys rejected::

    {"schema_version": 1,
     "task": {...}, "model": {...}, "train": {...}, "estimator": {...}}
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .estimators import EstimatorConfig, EstimatorKind
from .model import MoELayerSpec, ToyModelSpec
from .trainer import TaskSpec, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TaskSection(_Section):
    kind: Literal["cluster-regression", "cluster-classification"] = "cluster-regression"
    n_clusters: int = Field(8, ge=1)
    d_model: int = Field(16, ge=1)
    d_out: int = Field(4, ge=1)
    samples_per_cluster: int = Field(256, ge=1)
    noise_std: float = Field(0.0, ge=0)
    mean_scale: float = Field(3.0, ge=0)
    cluster_weights: Optional[list[float]] = None
    seed: int = 0


class ModelSection(_Section):
    depth: int = Field(2, ge=1)
    d_model: int = Field(16, ge=1)
    d_inner: int = Field(32, ge=1)
    n_expert: int = Field(8, ge=1)
    top_k: int = Field(2, ge=1)
    d_out: int = Field(4, ge=1)
    head: Literal["regression", "classification"] = "regression"


class EstimatorSection(_Section):
    kind: EstimatorKind = EstimatorKind.SPARSEMIXER_V2
    r_thresh: float = Field(0.1, ge=0)
    temperature: Optional[float] = Field(None, gt=0)
    bernoulli_p: Optional[float] = Field(None, ge=0, le=1)
    jitter_epsilon: float = Field(0.01, ge=0)
    renormalize: bool = False
    inference_mode: Literal["deterministic", "sampled"] = "deterministic"


class TrainSection(_Section):
    steps: int = Field(5000, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = Field(1e-2, ge=0)
    balance_scope: Literal["local", "global"] = "global"
    n_shards: int = Field(4, ge=1)
    seed: int = Field(0, ge=0, le=2**64 - 1)
    recipe: str = "main"
    eval_interval: int = Field(100, ge=1)


class RunConfig(_Section):
    schema_version: Literal[1] = 1
    task: TaskSection = TaskSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    estimator: EstimatorSection = EstimatorSection()

    @model_validator(mode="after")
    def _consistent(self):
        if self.task.d_model != self.model.d_model:
            raise ValueError(f"task.d_model={self.task.d_model} != model.d_model={self.model.d_model}")
        if self.task.d_out != self.model.d_out:
            raise ValueError(f"task.d_out={self.task.d_out} != model.d_out={self.model.d_out}")
        want = "classification" if self.task.kind == "cluster-classification" else "regression"
        if self.model.head != want:
            raise ValueError(f"task kind {self.task.kind} needs model.head={want!r}")
        if self.model.top_k > self.model.n_expert:
            raise ValueError("model.top_k exceeds model.n_expert")
        return self

    # ------------------------------------------------------------ conversions

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(**self.estimator.model_dump())

    def task_spec(self) -> TaskSpec:
        d = self.task.model_dump()
        if d["cluster_weights"] is not None:
            d["cluster_weights"] = tuple(d["cluster_weights"])
        return TaskSpec(**d)

    def model_spec(self) -> ToyModelSpec:
        m = self.model
        layer = MoELayerSpec(m.n_expert, m.top_k, m.d_model, m.d_inner, self.estimator_config())
        return ToyModelSpec(tuple(layer for _ in range(m.depth)), m.d_out, m.head)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train.model_dump())

    def with_seed(self, seed: int) -> RunConfig:
        d = self.model_dump()
        d["train"]["seed"] = seed
        return parse_config(d)

    def effective(self) -> dict:
        """Every field with defaults resolved, including per-kind estimator constants."""
        d = self.model_dump(mode="json")
        est = self.estimator_config()
        d["estimator"]["temperature"] = est.temperature
        d["estimator"]["bernoulli_p"] = est.bernoulli_p
        return d


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    try:
        return parse_config(data)
    except ConfigError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.effective(), indent=2, sort_keys=True) + "\n")
