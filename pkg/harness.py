"""
Experiment orchestration.

``run_sequence`` packs the configured tasks into one network in a given order,
checking after every task that the frozen tasks still produce bitwise the
same logits. The studies repeat it (or a two-task slice of it) across
orderings, pruning ratios, trainable layers and bias modes, and collect one
row per task per run. Rows are written with ``emit_report``.
"""

import copy
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import packedparams as pp
from config import ExperimentConfig, TaskDatasetSpec
from errors import InputError, InvariantViolation, PackingError, ReportIOError, ZeroForgettingError
from lifecycle import (PackedNetwork, add_task, bias_overhead_bytes, error_rate, mask_states,
                       model_size_bytes, prune_task, prune_task_filters, retrain_task, snapshot, task_loss,
                       train_task)
from pruner import budget_report
from utils.data_generator import DataGenerator

logger = logging.getLogger(__name__)

REPORT_FORMATS = ("csv", "json")
DEFAULT_STUDY_RATIOS = (0.50, 0.75, 0.90)
PROBE_STREAM = 7
TIMING_COLUMN = "wall_time"


@dataclass
class MetricsRow:
    """One task of one packing run. Errors are top-1 percentages on the eval split."""

    seed: int
    ordering: str
    position: int
    task: str
    ratio: float
    pre_prune_error: float
    post_prune_error: float
    post_retrain_error: float
    error: float
    owned_parameters: int
    free_parameters: int
    total_parameters: int
    mask_states: int
    overhead_bytes: int
    bias_overhead_bytes: int
    model_bytes: int
    zero_forgetting: bool
    wall_time: float = 0.0


@dataclass
class ForgettingRow:
    """Error of an earlier task re-measured after a later task was packed."""

    seed: int
    ordering: str
    task: str
    position: int
    after_task: str
    after_position: int
    error: float
    delta: float


@dataclass
class RatioRow:
    seed: int
    task: str
    ratio: float
    pre_prune_error: float
    post_prune_error: float
    post_retrain_error: float
    pre_prune_loss: float
    post_prune_loss: float
    post_retrain_loss: float


@dataclass
class LayerAblationRow:
    seed: int
    task: str
    layers: str
    error: float


@dataclass
class BiasRow:
    seed: int
    ordering: str
    position: int
    task: str
    shared_error: float
    separate_error: float
    gap: float
    shared_bias_bytes: int
    separate_bias_bytes: int


@dataclass
class BaselineRow:
    seed: int
    task: str
    error: float
    model_bytes: int


@dataclass
class SequenceResult:
    rows: List[MetricsRow]
    forgetting: List[ForgettingRow]
    network: Optional[PackedNetwork] = None


def ordering_label(specs: Sequence[TaskDatasetSpec]) -> str:
    return ">".join(spec.name for spec in specs)


def layer_set_label(layers: Optional[Sequence[str]]) -> str:
    if layers is None:
        return "all"
    return "+".join(layers) if layers else "classifier_only"


def probe_inputs(config: ExperimentConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, PROBE_STREAM])
    return rng.standard_normal((config.probe_count,) + tuple(config.input_shape)).astype(np.float32)


def _datasets(specs):
    generator = DataGenerator()
    return {spec.name: generator.generate_dataset(spec) for spec in specs}


def _context(error: PackingError, seed, label, task):
    """Same error type, message prefixed with the run it happened in."""
    message = f"run seed={seed} ordering={label} task '{task}': {error}"
    try:
        return type(error)(message)
    except TypeError:
        return PackingError(message)


def _retrain_schedule(schedule, pruned: int):
    # nothing was removed, so there is nothing to recover
    return schedule if pruned else replace(schedule, retrain_epochs=0)


def _pack_task(net, config, spec, data, ratio, trainable_layers=None, track_loss=False):
    """
    add -> train -> prune -> retrain one task.

    Returns (t, errors, losses): eval error after training, after pruning and
    after retraining, and the training-set loss at the same points (None
    unless ``track_loss``).
    """
    x_train, y_train, x_eval, y_eval = data
    errors, losses = [], []

    def measure():
        errors.append(error_rate(net, t, x_eval, y_eval))
        losses.append(task_loss(net, t, x_train, y_train) if track_loss else None)

    t = add_task(net, spec.name, spec.class_count)
    train_task(net, t, x_train, y_train, config.schedule, trainable_layers=trainable_layers)
    measure()
    if config.filter_pruning_mode:
        removed = prune_task_filters(net, t, x_train, y_train, config.filters_per_step, config.filter_steps)
        pruned = len(removed)
    else:
        pruned = sum(d.pruned for d in prune_task(net, t, ratio))
    measure()
    retrain_task(net, t, x_train, y_train, _retrain_schedule(config.schedule, pruned))
    measure()
    return t, tuple(errors), tuple(losses)


def run_sequence(config: ExperimentConfig, ordering: Optional[Sequence[int]] = None,
                 seed: Optional[int] = None) -> SequenceResult:
    """
    Pack every task of ``ordering`` into one network, one full lifecycle each.

    After each task freezes, every earlier task's logits on a fixed probe set
    must be bitwise unchanged; otherwise ZeroForgettingError aborts the run.
    The configured ratios apply by position, not by task.
    """
    seed = config.seeds[0] if seed is None else seed
    specs = config.ordered_tasks(ordering)
    label = ordering_label(specs)
    data = _datasets(specs)
    probes = probe_inputs(config, seed)
    logger.info("Running ordering %s with seed %d", label, seed)

    net = PackedNetwork(config.backbone, config.input_shape, seed=seed, separate_bias=config.separate_bias)
    snapshots: Dict[int, np.ndarray] = {}
    frozen_errors: Dict[int, float] = {}
    partial, forgetting = [], []
    for position, (spec, ratio) in enumerate(zip(specs, config.ratios), start=1):
        # the first task always trains the whole backbone
        layers = config.trainable_layer_subset if position > 1 else None
        start = time.perf_counter()
        try:
            t, errors, _ = _pack_task(net, config, spec, data[spec.name], ratio, layers)
            pre, post_prune, post_retrain = errors
        except InvariantViolation:
            raise
        except PackingError as e:
            raise _context(e, seed, label, spec.name) from e
        elapsed = time.perf_counter() - start

        for prior, expected in snapshots.items():
            if not np.array_equal(snapshot(net, prior, probes), expected):
                raise ZeroForgettingError(f"run seed={seed} ordering={label}: task {prior} "
                                          f"('{specs[prior - 1].name}') changed after adding '{spec.name}'")
            error = error_rate(net, prior, *data[specs[prior - 1].name][2:])
            forgetting.append(ForgettingRow(seed, label, specs[prior - 1].name, prior, spec.name, position,
                                            error, error - frozen_errors[prior]))
        snapshots[t] = snapshot(net, t, probes)
        frozen_errors[t] = post_retrain
        ledger = budget_report(net.ownership)
        partial.append(dict(seed=seed, ordering=label, position=position, task=spec.name,
                            ratio=float(net.task(t).ratio), pre_prune_error=pre,
                            post_prune_error=post_prune, post_retrain_error=post_retrain,
                            free_parameters=ledger.free, wall_time=elapsed))

    final = budget_report(net.ownership)
    states = mask_states(net)
    rows = []
    for t, values in enumerate(partial, start=1):
        _, _, x_eval, y_eval = data[values["task"]]
        rows.append(MetricsRow(
            error=error_rate(net, t, x_eval, y_eval),
            owned_parameters=final.owned[t],
            total_parameters=final.total,
            mask_states=states,
            overhead_bytes=pp.overhead_bytes(final.total, states),
            bias_overhead_bytes=bias_overhead_bytes(net),
            model_bytes=model_size_bytes(net),
            zero_forgetting=True,
            **values,
        ))
    return SequenceResult(rows=rows, forgetting=forgetting, network=net)


def _run_job(job):
    config, ordering, seed = job
    result = run_sequence(config, ordering, seed)
    result.network = None
    return result


def run_jobs(config: ExperimentConfig, jobs: Sequence[Tuple[Sequence[int], int]]) -> List[SequenceResult]:
    """Run (ordering, seed) pairs, in parallel when ``config.workers > 1``; results keep job order."""
    payload = [(config, list(ordering), seed) for ordering, seed in jobs]
    if config.workers > 1 and len(payload) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(_run_job, payload))
    return [_run_job(job) for job in payload]


def run_experiment(config: ExperimentConfig) -> SequenceResult:
    """The configured ordering once per seed."""
    results = run_jobs(config, [(config.ordering, seed) for seed in config.seeds])
    return SequenceResult(rows=[row for r in results for row in r.rows],
                          forgetting=[row for r in results for row in r.forgetting])


def run_ordering_study(config: ExperimentConfig) -> List[MetricsRow]:
    """Every permutation of the tasks under every seed; one row per task per run."""
    orderings = list(itertools.permutations(range(len(config.tasks))))
    jobs = [(ordering, seed) for seed in config.seeds for ordering in orderings]
    logger.info("Ordering study: %d orderings x %d seeds", len(orderings), len(config.seeds))
    return [row for result in run_jobs(config, jobs) for row in result.rows]


def _study_pair(config: ExperimentConfig):
    specs = config.ordered_tasks()
    base, studied = (specs[0], specs[1]) if len(specs) > 1 else (None, specs[0])
    return base, studied, _datasets([s for s in (base, studied) if s is not None])


def _base_network(config, seed, base, data):
    net = PackedNetwork(config.backbone, config.input_shape, seed=seed, separate_bias=config.separate_bias)
    if base is not None:
        _pack_task(net, config, base, data[base.name], config.ratios[0])
    return net


def run_ratio_study(config: ExperimentConfig, ratios: Sequence[float] = DEFAULT_STUDY_RATIOS) -> List[RatioRow]:
    """
    Error of the second task before pruning, right after pruning and after
    retraining, for each ratio, with the training-set loss at the same points.
    The first task is packed at ``config.ratios[0]`` and shared by every ratio
    of a seed.
    """
    for ratio in ratios:
        if not 0.0 <= ratio <= 1.0:
            raise InputError(f"pruning ratio must lie in [0, 1], got {ratio}")
    base, studied, data = _study_pair(config)
    rows = []
    for seed in config.seeds:
        packed = _base_network(config, seed, base, data)
        for ratio in ratios:
            net = copy.deepcopy(packed)
            _, errors, losses = _pack_task(net, replace(config, filter_pruning_mode=False), studied,
                                           data[studied.name], ratio, track_loss=True)
            rows.append(RatioRow(seed, studied.name, float(ratio), *errors, *losses))
            logger.info("Ratio %.2f seed %d: error %.1f -> %.1f -> %.1f, loss %.4f -> %.4f -> %.4f",
                        ratio, seed, *errors, *losses)
    return rows


def default_layer_sets(config: ExperimentConfig) -> List[List[str]]:
    """Classifier only, then the trainable set growing from the top layer down to all of them."""
    names = [spec.name for spec in config.backbone if spec.prunable]
    return [names[len(names) - k:] if k else [] for k in range(len(names) + 1)]


def run_layer_ablation(config: ExperimentConfig,
                       trainable_layer_sets: Optional[Sequence[Optional[Sequence[str]]]] = None
                       ) -> List[LayerAblationRow]:
    """
    Error of the second task when only the named layers' FREE weights may
    train (the task head always trains). Measured right after training.
    """
    sets = default_layer_sets(config) if trainable_layer_sets is None else trainable_layer_sets
    base, studied, data = _study_pair(config)
    x_train, y_train, x_eval, y_eval = data[studied.name]
    rows = []
    for seed in config.seeds:
        packed = _base_network(config, seed, base, data)
        for layers in sets:
            net = copy.deepcopy(packed)
            t = add_task(net, studied.name, studied.class_count)
            train_task(net, t, x_train, y_train, config.schedule,
                       trainable_layers=None if layers is None else list(layers))
            rows.append(LayerAblationRow(seed, studied.name, layer_set_label(layers),
                                         error_rate(net, t, x_eval, y_eval)))
    return rows


def run_bias_ablation(config: ExperimentConfig) -> List[BiasRow]:
    """The configured run twice per seed, shared biases against per-task biases."""
    shared = run_jobs(replace(config, separate_bias=False), [(config.ordering, s) for s in config.seeds])
    separate = run_jobs(replace(config, separate_bias=True), [(config.ordering, s) for s in config.seeds])
    rows = []
    for left, right in zip(shared, separate):
        for a, b in zip(left.rows, right.rows):
            rows.append(BiasRow(a.seed, a.ordering, a.position, a.task, a.error, b.error, b.error - a.error,
                                a.bias_overhead_bytes, b.bias_overhead_bytes))
    return rows


def run_individual_baseline(config: ExperimentConfig) -> List[BaselineRow]:
    """Each task alone on a fresh network, fully trained, never pruned."""
    data = _datasets(config.tasks)
    rows = []
    for seed in config.seeds:
        for spec in config.tasks:
            x_train, y_train, x_eval, y_eval = data[spec.name]
            net = PackedNetwork(config.backbone, config.input_shape, seed=seed)
            t = add_task(net, spec.name, spec.class_count)
            train_task(net, t, x_train, y_train, config.schedule)
            rows.append(BaselineRow(seed, spec.name, error_rate(net, t, x_eval, y_eval), model_size_bytes(net)))
    return rows


def report_columns(row_type=MetricsRow, include_timing: bool = False) -> List[str]:
    return [f.name for f in fields(row_type) if include_timing or f.name != TIMING_COLUMN]


def _as_record(row):
    return asdict(row) if hasattr(row, "__dataclass_fields__") else dict(row)


def _format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if not math.isfinite(value) else float(f"{value:.9g}")
    if isinstance(value, np.integer):
        return int(value)
    return value


def render_report(rows, fmt: str = "csv", row_type=None, include_timing: bool = False,
                  columns: Optional[Sequence[str]] = None) -> str:
    """Report text with a fixed column order and floats cut to 9 significant digits."""
    if fmt not in REPORT_FORMATS:
        raise InputError(f"report format '{fmt}' not in {REPORT_FORMATS}")
    rows = list(rows)
    if row_type is None:
        row_type = type(rows[0]) if rows and hasattr(rows[0], "__dataclass_fields__") else MetricsRow
    if columns is None:
        columns = report_columns(row_type, include_timing)
    columns = list(columns)
    records = [{column: _format_value(_as_record(row)[column]) for column in columns} for row in rows]
    if fmt == "json":
        return json.dumps({"columns": columns, "rows": records}, indent=2) + "\n"
    frame = pd.DataFrame(records, columns=columns)
    return frame.to_csv(index=False, float_format="%.9g", lineterminator="\n")


def emit_report(rows, fmt: str = "csv", path=None, row_type=None, include_timing: bool = False,
                columns: Optional[Sequence[str]] = None) -> str:
    """Render rows and write them to ``path`` (when given). Returns the text."""
    rows = list(rows)
    text = render_report(rows, fmt, row_type, include_timing, columns)
    if path is not None:
        try:
            with open(path, "w", encoding="utf-8", newline="") as handle:
                handle.write(text)
        except OSError as e:
            raise ReportIOError(f"Error writing report {path}: {str(e)}") from e
        logger.info("Wrote %d rows to %s", len(rows), path)
    return text
