"""
Experiment configuration.

Config files are JSON objects whose keys are ``ExperimentConfig`` fields;
anything left out takes its default. Defaults that depend on the machine come
from the environment (or a ``.env`` file):

    TASKNET_SEED        default run seed (0)
    TASKNET_LOG_LEVEL   logging level for the CLI (INFO)
    TASKNET_OUTPUT_DIR  where CLI reports and figures go (./results)
    TASKNET_WORKERS     parallel runs for studies (1)
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from errors import InputError
from lifecycle import TrainSchedule, desk_backbone
from tensorcore import LayerSpec

load_dotenv()

logger = logging.getLogger(__name__)

DATASET_KINDS = ("gratings", "gaussian_blobs", "permuted_base")


def _env_int(name, default):
    value = os.environ.get(name, "")
    try:
        return int(value) if value else default
    except ValueError as e:
        raise InputError(f"Error reading {name}: {str(e)}") from e


def default_seed() -> int:
    return _env_int("TASKNET_SEED", 0)


def default_workers() -> int:
    return max(1, _env_int("TASKNET_WORKERS", 1))


def default_log_level() -> str:
    return os.environ.get("TASKNET_LOG_LEVEL", "INFO").upper()


def default_output_dir() -> Path:
    return Path(os.environ.get("TASKNET_OUTPUT_DIR", "./results"))


def _reject_unknown(cls, values, what):
    if not isinstance(values, dict):
        raise InputError(f"{what} must be a JSON object, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise InputError(f"unknown {what} keys: {unknown}")


@dataclass(frozen=True)
class TaskDatasetSpec:
    """
    One synthetic task. Generation is a pure function of these fields.

    gratings        sinusoidal gratings; class k sits at an orientation inside
                    ``orientation_band`` (degrees, [lo, hi))
    gaussian_blobs  isotropic clusters in pixel space, ``cluster_std`` wide
    permuted_base   a ``base_kind`` dataset with pixels shuffled by
                    ``permutation_seed`` (None keeps the identity)
    """

    name: str
    kind: str = "gratings"
    class_count: int = 5
    train_samples: int = 2000
    eval_samples: int = 1000
    input_shape: Tuple[int, ...] = (1, 20, 20)
    orientation_band: Tuple[float, float] = (0.0, 60.0)
    frequency: float = 0.15
    noise: float = 0.5
    phase_jitter: float = 0.3
    cluster_std: float = 1.0
    permutation_seed: Optional[int] = None
    base_kind: str = "gratings"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "orientation_band", tuple(float(v) for v in self.orientation_band))
        if self.kind not in DATASET_KINDS:
            raise InputError(f"dataset kind '{self.kind}' not in {DATASET_KINDS}")
        if self.base_kind not in DATASET_KINDS[:2]:
            raise InputError(f"base kind '{self.base_kind}' must be gratings or gaussian_blobs")
        if self.class_count < 2:
            raise InputError(f"task '{self.name}' needs at least 2 classes, got {self.class_count}")
        if self.train_samples < 1 or self.eval_samples < 1:
            raise InputError(f"task '{self.name}' needs samples in both splits, got "
                             f"{self.train_samples}/{self.eval_samples}")
        if len(self.input_shape) != 3:
            raise InputError(f"input shape must be (channels, height, width), got {self.input_shape}")
        low, high = self.orientation_band
        if not low < high:
            raise InputError(f"orientation band must be [lo, hi) with lo < hi, got {self.orientation_band}")

    def to_dict(self):
        values = asdict(self)
        values["input_shape"] = list(self.input_shape)
        values["orientation_band"] = list(self.orientation_band)
        return values

    @classmethod
    def from_dict(cls, values):
        _reject_unknown(cls, values, "task")
        if "name" not in values:
            raise InputError("every task needs a name")
        return cls(**values)


def default_tasks(input_shape=(1, 20, 20)) -> List[TaskDatasetSpec]:
    """
    Three gratings tasks over narrow disjoint orientation bands (3 degrees between
    classes), noisier towards the last, so none of them is solved outright.
    """
    return [
        TaskDatasetSpec("gratings_a", input_shape=input_shape, orientation_band=(0.0, 15.0), noise=1.5,
                        phase_jitter=1.0, seed=11),
        TaskDatasetSpec("gratings_b", input_shape=input_shape, orientation_band=(60.0, 75.0), noise=2.0,
                        phase_jitter=1.0, seed=12),
        TaskDatasetSpec("gratings_c", input_shape=input_shape, orientation_band=(120.0, 135.0), noise=2.5,
                        phase_jitter=1.0, seed=13),
    ]


@dataclass
class ExperimentConfig:
    input_shape: Tuple[int, ...] = (1, 20, 20)
    backbone: Optional[List[LayerSpec]] = None
    tasks: Optional[List[TaskDatasetSpec]] = None
    ordering: Optional[List[int]] = None
    ratios: Optional[List[float]] = None
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    seeds: Optional[List[int]] = None
    separate_bias: bool = False
    trainable_layer_subset: Optional[List[str]] = None
    filter_pruning_mode: bool = False
    filters_per_step: int = 4
    filter_steps: int = 2
    probe_count: int = 256
    workers: Optional[int] = None

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.backbone is None:
            self.backbone = desk_backbone(self.input_shape)
        if self.tasks is None:
            self.tasks = default_tasks(self.input_shape)
        if self.ordering is None:
            self.ordering = list(range(len(self.tasks)))
        if self.ratios is None:
            self.ratios = [0.5] + [0.75] * (len(self.tasks) - 1)
        if self.seeds is None:
            self.seeds = [default_seed()]
        if self.workers is None:
            self.workers = default_workers()
        self.validate()

    def validate(self):
        if not self.tasks:
            raise InputError("an experiment needs at least one task")
        if sorted(self.ordering) != list(range(len(self.tasks))):
            raise InputError(f"ordering {self.ordering} is not a permutation of {len(self.tasks)} tasks")
        if len(self.ratios) != len(self.tasks):
            raise InputError(f"{len(self.ratios)} ratios for {len(self.tasks)} tasks")
        for ratio in self.ratios:
            if not 0.0 <= ratio <= 1.0:
                raise InputError(f"pruning ratio must lie in [0, 1], got {ratio}")
        if not self.seeds:
            raise InputError("at least one seed is required")
        names = [spec.name for spec in self.tasks]
        if len(set(names)) != len(names):
            raise InputError(f"task names must be unique, got {names}")
        for spec in self.tasks:
            if spec.input_shape != self.input_shape:
                raise InputError(f"task '{spec.name}' has input shape {spec.input_shape}, "
                                 f"network expects {self.input_shape}")
        if self.filters_per_step < 0 or self.filter_steps < 0:
            raise InputError("filter pruning counts must be non-negative")
        if self.probe_count < 1:
            raise InputError(f"probe_count must be positive, got {self.probe_count}")
        if self.workers < 1:
            raise InputError(f"workers must be positive, got {self.workers}")

    def ordered_tasks(self, ordering: Optional[Sequence[int]] = None) -> List[TaskDatasetSpec]:
        return [self.tasks[i] for i in (self.ordering if ordering is None else ordering)]

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "backbone": [spec.to_dict() for spec in self.backbone],
            "tasks": [spec.to_dict() for spec in self.tasks],
            "ordering": list(self.ordering),
            "ratios": list(self.ratios),
            "schedule": self.schedule.to_dict(),
            "seeds": list(self.seeds),
            "separate_bias": self.separate_bias,
            "trainable_layer_subset": self.trainable_layer_subset,
            "filter_pruning_mode": self.filter_pruning_mode,
            "filters_per_step": self.filters_per_step,
            "filter_steps": self.filter_steps,
            "probe_count": self.probe_count,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, values):
        _reject_unknown(cls, values, "config")
        values = dict(values)
        input_shape = tuple(values.get("input_shape", (1, 20, 20)))
        if values.get("backbone") is not None:
            values["backbone"] = [LayerSpec.from_dict(spec) for spec in values["backbone"]]
        if values.get("tasks") is not None:
            values["tasks"] = [TaskDatasetSpec.from_dict({"input_shape": input_shape, **spec})
                               for spec in values["tasks"]]
        if "schedule" in values:
            _reject_unknown(TrainSchedule, values["schedule"], "schedule")
            values["schedule"] = TrainSchedule.from_dict(values["schedule"])
        try:
            return cls(**values)
        except TypeError as e:
            raise InputError(f"Error building config: {str(e)}") from e


def load_config(path=None, seed: Optional[int] = None) -> ExperimentConfig:
    """Read a JSON config; ``seed`` replaces the configured seeds with that one seed."""
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as handle:
                values = json.load(handle)
        except json.JSONDecodeError as e:
            raise InputError(f"Error parsing config {path}: {str(e)}") from e
        except OSError as e:
            raise InputError(f"Error reading config {path}: {str(e)}") from e
    if seed is not None:
        values = {**values, "seeds": [seed]}
    config = ExperimentConfig.from_dict(values)
    logger.debug("Loaded config from %s: %d tasks, seeds %s", path or "defaults", len(config.tasks), config.seeds)
    return config
