"""Experiment configuration: pydantic models loaded from YAML (``params.yaml``).

Sections may be written nested (``kac: {a: 25}``) or with dotted keys (``kac.a: 25``);
``--set`` overrides use the dotted form with YAML-parsed values.
"""
import hashlib
import json
import os
from typing import Annotated, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from config.logging_config import get_logger
from src.datasets import Dataset, load_data, make_dataset
from src.distill import DistillConfig, validate_stage_schedule
from src.exceptions import ConfigError
from src.integrate import IntegratorSpec
from src.kac_core import KacParams, Schedule, SeedSpec
from src.mlp import OptimizerConfig

logger = get_logger(__name__)

DEFAULT_CONFIG_PATH = './params.yaml'


class Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class KacSection(Section):
    a: Annotated[float, Field(gt=0, description='Poisson rate of direction reversals')] = 2.0
    c: Annotated[float, Field(gt=0, description='Wave speed')] = 1.0


class ScheduleSection(Section):
    kind: Literal['linear', 'quadratic', 'tabulated'] = 'linear'
    nodes: dict | None = None


class DataSection(Section):
    name: Literal['two-mode-1d', 'two-class-1d', 'grid-2d'] = 'two-mode-1d'
    path: str | None = Field(default=None, description='CSV dataset; overrides name when set')
    n_points: Annotated[int, Field(ge=1)] = 64
    spread: Annotated[float, Field(ge=0)] = 0.1


class ModelSection(Section):
    hidden: list[Annotated[int, Field(ge=1)]] = [64, 64]
    activation: Literal['tanh'] = 'tanh'
    conditional: bool = Field(default=False, description='One-hot class input with a null slot')
    checkpoint: str = 'local_Storage/models/velocity_model.joblib'


class TrainSection(Section):
    step_size: Annotated[float, Field(gt=0)] = 1e-3
    iterations: Annotated[int, Field(ge=0)] = 2000
    batch_size: Annotated[int, Field(ge=1)] = 256
    label_drop: Annotated[float, Field(ge=0, le=1)] = 0.1
    optimizer: Literal['sgd', 'adamw'] = 'adamw'
    weight_decay: Annotated[float, Field(ge=0)] = 0.01
    grad_clip: Annotated[float, Field(gt=0)] | None = 1.0
    lr_schedule: Literal['constant', 'warmup_flat_cosine'] = 'warmup_flat_cosine'
    ema_decay: Annotated[float, Field(gt=0, lt=1)] | None = None
    exact_noise: bool = Field(default=True, description='Exact telegraph-law states; false simulates reversal paths')
    log_every: Annotated[int, Field(ge=0)] = 100


class IntegratorSection(Section):
    method: Literal['euler', 'midpoint', 'ab2'] = 'midpoint'
    steps: Annotated[int, Field(ge=1)] = 100
    n_samples: Annotated[int, Field(ge=1)] = 2000
    field: Literal['parametric', 'marginal-oracle'] = 'parametric'


class GuidanceSection(Section):
    w: float = 0.0
    label: Annotated[int, Field(ge=0)] | None = None


class DistillSection(Section):
    substeps: Annotated[int, Field(ge=2)] = 2
    steps: Annotated[int, Field(ge=1)] = 4
    teacher_method: Literal['euler', 'midpoint', 'ab2'] = 'euler'
    learning_rate: Annotated[float, Field(gt=0)] = 1e-3
    batch_size: Annotated[int, Field(ge=1)] = 256
    max_iter: Annotated[int, Field(ge=0)] = 500
    stage_schedule: list[int] = [20, 4, 2, 1]
    optimizer: Literal['sgd', 'adamw'] = 'adamw'
    label_drop: Annotated[float, Field(ge=0, le=1)] = 0.0
    state_mode: Literal['marginal', 'rollout'] = 'marginal'
    checkpoint_dir: str = 'local_Storage/models/students'

    @field_validator('stage_schedule')
    @classmethod
    def _divisible(cls, value):
        try:
            return list(validate_stage_schedule(value))
        except ConfigError as e:
            raise ValueError(str(e)) from e


class SimulateSection(Section):
    n_paths: Annotated[int, Field(ge=0)] = 10_000
    t_end: Annotated[float, Field(ge=0)] = 1.0
    n_times: Annotated[int, Field(ge=1)] = 11
    d: Annotated[int, Field(ge=1)] = 1


class VerifySection(Section):
    suite: Literal['density', 'velocity', 'guidance', 'integrators', 'stability', 'lemmas', 'all'] = 'all'
    scale: Literal['quick', 'full'] = 'full'


class SweepSection(Section):
    a: list[Annotated[float, Field(gt=0)]] = [1.0, 2.0, 8.0]
    c: list[Annotated[float, Field(gt=0)]] = [0.5, 1.0, 2.0]
    schedules: list[Literal['linear', 'quadratic']] = ['linear', 'quadratic']
    n_samples: Annotated[int, Field(ge=2)] = 2000
    steps: Annotated[int, Field(ge=1)] = 20
    method: Literal['euler', 'midpoint', 'ab2'] = 'midpoint'
    replicates: Annotated[int, Field(ge=2)] = 5


class SeedSection(Section):
    master: Annotated[int, Field(ge=0)] = 0


class OutputSection(Section):
    dir: str = 'local_Storage/runs'
    plots: bool = True


class TrackingSection(Section):
    enabled: bool = False
    uri: str = 'file:./local_Storage/mlruns'
    experiment: str = 'kacflow'


class ExperimentConfig(Section):
    kac: KacSection = KacSection()
    sched: ScheduleSection = ScheduleSection()
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    integrator: IntegratorSection = IntegratorSection()
    guidance: GuidanceSection = GuidanceSection()
    distill: DistillSection = DistillSection()
    simulate: SimulateSection = SimulateSection()
    verify: VerifySection = VerifySection()
    sweep: SweepSection = SweepSection()
    seeds: SeedSection = SeedSection()
    output: OutputSection = OutputSection()
    tracking: TrackingSection = TrackingSection()

    def kac_params(self, d: int = 1) -> KacParams:
        return KacParams(self.kac.a, self.kac.c, d)

    def schedule(self) -> Schedule:
        return Schedule.from_name(self.sched.kind, self.sched.nodes)

    def dataset(self) -> Dataset:
        if self.data.path:
            return load_data(self.data.path)
        return make_dataset(self.data.name, self.data.n_points, spread=self.data.spread)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**self.train.model_dump(exclude={'exact_noise'}))

    def integrator_spec(self) -> IntegratorSpec:
        return IntegratorSpec(self.integrator.method, self.integrator.steps)

    def distill_config(self, jobs: int = 1) -> DistillConfig:
        options = self.distill.model_dump(exclude={'checkpoint_dir'})
        options['stage_schedule'] = tuple(options['stage_schedule'])
        return DistillConfig(**options, jobs=jobs)

    def seed(self, stream: int, *substream: int) -> SeedSpec:
        return SeedSpec(self.seeds.master, stream, tuple(substream))


def _expand_dotted(raw: dict) -> dict:
    """Turn ``{'kac.a': 25}`` into ``{'kac': {'a': 25}}``, merging with nested sections."""
    out = {}
    for key, value in raw.items():
        parts = str(key).split('.')
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f'key {key!r} conflicts with a scalar value')
        leaf = parts[-1]
        if isinstance(value, dict):
            value = _expand_dotted(value)
            if isinstance(node.get(leaf), dict):
                node[leaf].update(value)
                continue
        node[leaf] = value
    return out


def parse_override(text: str) -> tuple[str, object]:
    if '=' not in text:
        raise ConfigError(f'override {text!r} must look like section.key=value')
    key, value = text.split('=', 1)
    try:
        return key.strip(), yaml.safe_load(value)
    except yaml.YAMLError as e:
        raise ConfigError(f'cannot parse override value for {key}: {e}') from e


def _describe_validation(error: ValidationError) -> str:
    problems = []
    for item in error.errors():
        location = '.'.join(str(part) for part in item['loc'])
        problems.append(f'{location}: {item["msg"]}')
    return '; '.join(problems)


def build_config(raw: dict | None, overrides=()) -> ExperimentConfig:
    merged = _expand_dotted(raw or {})
    for text in overrides:
        key, value = parse_override(text)
        merged = _expand_dotted({**merged, key: value})
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        message = _describe_validation(e)
        logger.error(f'Invalid configuration: {message}')
        raise ConfigError(message) from e


def _read_flat(text: str) -> dict:
    """``section.key=value`` lines; blank lines and ``#`` comments are skipped."""
    raw = {}
    for line in text.splitlines():
        line = line.split('#', 1)[0].strip()
        if line:
            key, value = parse_override(line)
            raw[key] = value
    return raw


def load_config(config_path: str | None = None, overrides=()) -> ExperimentConfig:
    """Load a YAML or flat ``key=value`` config (default ``params.yaml``) and apply overrides."""
    raw = {}
    path = config_path or (DEFAULT_CONFIG_PATH if os.path.exists(DEFAULT_CONFIG_PATH) else None)
    if path is not None:
        try:
            with open(path, 'r') as f:
                text = f.read()
            raw = (yaml.safe_load(text) or {}) if path.endswith(('.yaml', '.yml')) else _read_flat(text)
            logger.info(f'Parameters retrieved from {path}')
        except FileNotFoundError:
            logger.error('File not found: %s', path)
            raise ConfigError(f'config file not found: {path}')
        except yaml.YAMLError as e:
            logger.error('YAML error: %s', e)
            raise ConfigError(f'cannot parse {path}: {e}') from e
        if not isinstance(raw, dict):
            raise ConfigError(f'{path} must contain a mapping')
    return build_config(raw, overrides)


def config_payload(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode='json')


def dump_config(cfg: ExperimentConfig, path: str) -> str:
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w') as f:
        yaml.safe_dump(config_payload(cfg), f, sort_keys=False)
    logger.debug(f'Config written to {path}')
    return path


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(config_payload(cfg), sort_keys=True).encode()).hexdigest()
