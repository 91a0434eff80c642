import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from config import ExperimentConfig, TaskDatasetSpec  # noqa: E402
from lifecycle import (PackedNetwork, TrainSchedule, add_task, desk_backbone, prune_task,  # noqa: E402
                       retrain_task, train_task)
from tensorcore import LayerSpec  # noqa: E402
from utils.data_generator import DataGenerator  # noqa: E402

TINY_SHAPE = (1, 8, 8)


def tiny_backbone():
    return [
        LayerSpec("conv2d", "conv1", 1, 4, kernel_size=3, padding=1),
        LayerSpec("batchnorm", "bn1", 4),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool2x2", "pool1"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("linear", "fc1", 64, 16),
        LayerSpec("relu", "relu2"),
    ]


def tiny_tasks(count=3):
    bands = [(0.0, 60.0), (60.0, 120.0), (120.0, 180.0), (20.0, 160.0)]
    return [TaskDatasetSpec(f"task_{chr(ord('a') + i)}", class_count=3, train_samples=120, eval_samples=60,
                            input_shape=TINY_SHAPE, orientation_band=bands[i], frequency=0.2, noise=0.3,
                            seed=100 + i)
            for i in range(count)]


def tiny_config(task_count=3, **overrides):
    values = dict(
        input_shape=TINY_SHAPE,
        backbone=desk_backbone(TINY_SHAPE, hidden=16),
        tasks=tiny_tasks(task_count),
        ratios=[0.5] + [0.75] * (task_count - 1),
        schedule=TrainSchedule(epochs=2, lr=0.05, retrain_epochs=1, batch_size=16),
        seeds=[0],
        probe_count=32,
        workers=1,
    )
    values.update(overrides)
    return ExperimentConfig(**values)


@pytest.fixture
def schedule():
    return TrainSchedule(epochs=2, lr=0.05, retrain_epochs=1, batch_size=16)


@pytest.fixture
def datasets():
    generator = DataGenerator()
    return [generator.generate_dataset(spec) for spec in tiny_tasks()]


@pytest.fixture
def probes():
    return np.random.default_rng(5).standard_normal((32,) + TINY_SHAPE).astype(np.float32)


@pytest.fixture
def tiny_net():
    return PackedNetwork(tiny_backbone(), TINY_SHAPE, seed=3)


def pack(net, data, schedule, ratio=0.5, name="task", classes=3):
    """Full lifecycle of one task; returns its id."""
    x_train, y_train, _, _ = data
    t = add_task(net, f"{name}_{len(net.tasks) + 1}", classes)
    train_task(net, t, x_train, y_train, schedule)
    prune_task(net, t, ratio)
    retrain_task(net, t, x_train, y_train, schedule)
    return t


@pytest.fixture(scope="module")
def packed_net():
    """Three tasks packed at 0.5 / 0.75 / 0.75 into the tiny backbone."""
    generator = DataGenerator()
    data = [generator.generate_dataset(spec) for spec in tiny_tasks()]
    schedule = TrainSchedule(epochs=2, lr=0.05, retrain_epochs=1, batch_size=16)
    net = PackedNetwork(tiny_backbone(), TINY_SHAPE, seed=3)
    for d, ratio in zip(data, (0.5, 0.75, 0.75)):
        pack(net, d, schedule, ratio)
    return net, data
