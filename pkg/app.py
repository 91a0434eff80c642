"""
Command-line interface for packing tasks into one network.

Single-network commands work on a checkpoint file and pull task data from the
experiment config (``--config``, defaults otherwise); the ``experiment``
group runs whole studies and writes reports. Exit codes: 0 on success, 2 when
a packing invariant breaks, 1 for any other error.
"""

import logging
import sys
from pathlib import Path

import click
import numpy as np

import checkpointio
import packedparams as pp
from config import default_log_level, default_output_dir, load_config
from errors import InputError, InvariantViolation, PackingError
from harness import (BaselineRow, BiasRow, ForgettingRow, LayerAblationRow, MetricsRow, RatioRow,
                     emit_report, run_bias_ablation, run_experiment, run_individual_baseline,
                     run_layer_ablation, run_ordering_study, run_ratio_study)
from lifecycle import (PackedNetwork, add_task, error_rate, infer, model_size_bytes, prune_task,
                       prune_task_filters, retrain_task, train_task)
from pruner import LEDGER_COLUMNS, budget_report
from utils.analytics import StudyAnalytics
from utils.data_generator import DataGenerator
from utils.visualization import StudyVisualizer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVARIANT = 2


def _task_data(config, name):
    for spec in config.tasks:
        if spec.name == name:
            return spec, DataGenerator().generate_dataset(spec)
    raise InputError(f"task '{name}' is not in the config (tasks: {[s.name for s in config.tasks]})")


def _write(rows, fmt, output, row_type, timing=False):
    text = emit_report(rows, fmt, output, row_type=row_type, include_timing=timing)
    if output is None:
        click.echo(text, nl=False)
    else:
        click.echo(f"Wrote {len(rows)} rows to {output}")


def _default_output(name, fmt):
    directory = default_output_dir()
    directory.mkdir(parents=True, exist_ok=True)
    return directory / f"{name}.{fmt}"


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             default=None, help="JSON experiment config (defaults when omitted).")
seed_option = click.option("--seed", type=int, default=None, help="Override the configured seeds with one seed.")
format_option = click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv",
                             show_default=True)
output_option = click.option("--output", type=click.Path(dir_okay=False), default=None,
                             help="Report path (default: TASKNET_OUTPUT_DIR/<study>.<format>).")
plot_option = click.option("--plot", type=click.Path(dir_okay=False), default=None,
                           help="Also write an HTML figure to this path.")


@click.group()
@click.option("--log-level", default=None, help="Logging level (default: TASKNET_LOG_LEVEL or INFO).")
def cli(log_level):
    """Pack several classification tasks into one network without forgetting."""
    logging.basicConfig(level=(log_level or default_log_level()).upper(), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


@cli.command()
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@config_option
@seed_option
def init(checkpoint, config_path, seed):
    """Create an empty packed network."""
    config = load_config(config_path, seed)
    net = PackedNetwork(config.backbone, config.input_shape, seed=config.seeds[0],
                        separate_bias=config.separate_bias)
    size = checkpointio.save(net, checkpoint)
    click.echo(f"Initialized {checkpoint}: {net.prunable_count} prunable parameters, {size} bytes")


@cli.command("add-task")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("name")
@config_option
def add_task_command(checkpoint, name, config_path):
    """Register task NAME (from the config) on the network."""
    config = load_config(config_path)
    spec, _ = _task_data(config, name)
    net = checkpointio.load(checkpoint)
    t = add_task(net, spec.name, spec.class_count)
    checkpointio.save(net, checkpoint)
    click.echo(f"Added task {t} ('{spec.name}', {spec.class_count} classes)")


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("task_id", type=int)
@config_option
@click.option("--layers", default=None, help="Comma-separated prunable layers allowed to train.")
def train(checkpoint, task_id, config_path, layers):
    """Train the open task on its FREE weights."""
    config = load_config(config_path)
    net = checkpointio.load(checkpoint)
    _, (x_train, y_train, x_eval, y_eval) = _task_data(config, net.task(task_id).name)
    names = None if layers is None else [n for n in layers.split(",") if n]
    history = train_task(net, task_id, x_train, y_train, config.schedule, trainable_layers=names)
    checkpointio.save(net, checkpoint)
    click.echo(f"Trained task {task_id}: final loss {history[-1] if history else float('nan'):.4f}, "
               f"eval error {error_rate(net, task_id, x_eval, y_eval):.2f}%")


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("task_id", type=int)
@click.option("--ratio", type=float, default=0.5, show_default=True)
@click.option("--filters", type=int, default=None, help="Prune whole filters instead, this many per step.")
@click.option("--steps", type=int, default=1, show_default=True)
@config_option
def prune(checkpoint, task_id, ratio, filters, steps, config_path):
    """Prune the open task and commit its survivors."""
    net = checkpointio.load(checkpoint)
    if filters is None:
        decisions = prune_task(net, task_id, ratio)
        message = f"pruned {sum(d.pruned for d in decisions)}, kept {sum(d.retained for d in decisions)}"
    else:
        config = load_config(config_path)
        _, (x_train, y_train, _, _) = _task_data(config, net.task(task_id).name)
        removed = prune_task_filters(net, task_id, x_train, y_train, filters, steps)
        message = f"removed {len(removed)} filters"
    checkpointio.save(net, checkpoint)
    click.echo(f"Task {task_id}: {message}")


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("task_id", type=int)
@config_option
def retrain(checkpoint, task_id, config_path):
    """Retrain the task's survivors and freeze it."""
    config = load_config(config_path)
    net = checkpointio.load(checkpoint)
    _, (x_train, y_train, x_eval, y_eval) = _task_data(config, net.task(task_id).name)
    retrain_task(net, task_id, x_train, y_train, config.schedule)
    checkpointio.save(net, checkpoint)
    click.echo(f"Task {task_id} frozen, eval error {error_rate(net, task_id, x_eval, y_eval):.2f}%")


@cli.command("infer")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("task_id", type=int)
@click.option("--inputs", "inputs_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help=".npy array of inputs; predicted classes are printed one per line.")
@config_option
def infer_command(checkpoint, task_id, inputs_path, config_path):
    """Evaluate a task, or classify the given inputs with it."""
    net = checkpointio.load(checkpoint)
    if inputs_path is not None:
        for label in infer(net, task_id, np.load(inputs_path).astype(np.float32)).argmax(axis=1):
            click.echo(int(label))
        return
    config = load_config(config_path)
    _, (_, _, x_eval, y_eval) = _task_data(config, net.task(task_id).name)
    click.echo(f"Task {task_id} ('{net.task(task_id).name}'): eval error "
               f"{error_rate(net, task_id, x_eval, y_eval):.2f}%")


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@format_option
@click.option("--output", type=click.Path(dir_okay=False), default=None)
def report(checkpoint, fmt, output):
    """Parameter budget of a checkpoint: owned weights per task and the FREE remainder."""
    net = checkpointio.load(checkpoint)
    rows = budget_report(net.ownership).to_rows()
    states = pp.encode(net.ownership).state_count
    rows.append({"owner": "mask_overhead_bytes", "parameters": pp.overhead_bytes(net.prunable_count, states)})
    rows.append({"owner": "model_bytes", "parameters": model_size_bytes(net)})
    text = emit_report(rows, fmt, output, columns=LEDGER_COLUMNS)
    if output is None:
        click.echo(text, nl=False)
    for record in net.tasks:
        logger.info("Task %d '%s': %s, ratio %s", record.id, record.name, record.state, record.ratio)


@cli.command("export")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("task_id", type=int)
@click.argument("destination", type=click.Path(dir_okay=False))
def export_command(checkpoint, task_id, destination):
    """Write a dense single-task checkpoint of TASK_ID."""
    size = checkpointio.export_task(checkpointio.load(checkpoint), task_id, destination)
    click.echo(f"Exported task {task_id} to {destination} ({size} bytes)")


@cli.group()
def experiment():
    """Run packing experiments and studies."""


def _study_options(func):
    for option in (plot_option, output_option, format_option, seed_option):
        func = option(func)
    return click.argument("config_path", type=click.Path(exists=True, dir_okay=False), required=False)(func)


@experiment.command("run")
@_study_options
@click.option("--timing", is_flag=True, help="Include wall time in the report.")
def experiment_run(config_path, seed, fmt, output, plot, timing):
    """Pack the configured ordering once per seed."""
    result = run_experiment(load_config(config_path, seed))
    output = output or _default_output("run", fmt)
    _write(result.rows, fmt, output, MetricsRow, timing)
    trace_path = Path(output).with_name(f"{Path(output).stem}_forgetting.{fmt}")
    _write(result.forgetting, fmt, trace_path, ForgettingRow)
    if plot:
        visualizer = StudyVisualizer(result.forgetting)
        visualizer.write_html(visualizer.create_visualization("forgetting"), plot)


@experiment.command("ordering")
@_study_options
def experiment_ordering(config_path, seed, fmt, output, plot):
    """Every ordering of the tasks; mean error by position added."""
    rows = run_ordering_study(load_config(config_path, seed))
    _write(rows, fmt, output or _default_output("ordering", fmt), MetricsRow)
    for _, row in StudyAnalytics(rows).position_summary().iterrows():
        click.echo(f"position {int(row['position'])}: mean {row['mean']:.2f}% "
                   f"(sem {row['sem']:.2f}, {int(row['runs'])} runs)")
    if plot:
        visualizer = StudyVisualizer(rows)
        visualizer.write_html(visualizer.create_visualization("ordering"), plot)


@experiment.command("ratios")
@_study_options
@click.option("--ratio", "ratios", type=float, multiple=True, help="Ratio to study (repeatable).")
def experiment_ratios(config_path, seed, fmt, output, plot, ratios):
    """Error before pruning, after pruning and after retraining, per ratio."""
    config = load_config(config_path, seed)
    rows = run_ratio_study(config, ratios) if ratios else run_ratio_study(config)
    _write(rows, fmt, output or _default_output("ratios", fmt), RatioRow)
    if plot:
        visualizer = StudyVisualizer(rows)
        visualizer.write_html(visualizer.create_visualization("ratios"), plot)


@experiment.command("layers")
@_study_options
@click.option("--set", "layer_sets", multiple=True,
              help="Comma-separated trainable layers (repeatable; empty string = classifier only).")
def experiment_layers(config_path, seed, fmt, output, plot, layer_sets):
    """Second-task error when only some layers may train."""
    config = load_config(config_path, seed)
    sets = [[n for n in s.split(",") if n] for s in layer_sets] if layer_sets else None
    rows = run_layer_ablation(config, sets)
    _write(rows, fmt, output or _default_output("layers", fmt), LayerAblationRow)
    if plot:
        visualizer = StudyVisualizer(rows)
        visualizer.write_html(visualizer.create_visualization("layers"), plot)


@experiment.command("bias")
@_study_options
def experiment_bias(config_path, seed, fmt, output, plot):
    """Shared biases against per-task biases."""
    rows = run_bias_ablation(load_config(config_path, seed))
    _write(rows, fmt, output or _default_output("bias", fmt), BiasRow)
    comparison = StudyAnalytics(rows).bias_comparison()
    click.echo(f"shared {comparison['shared_mean']:.2f}% vs separate {comparison['separate_mean']:.2f}% "
               f"(max gap {comparison['max_abs_gap']:.2f}, p={comparison['p_value']:.3g})")
    if plot:
        visualizer = StudyVisualizer(rows)
        visualizer.write_html(visualizer.create_visualization("bias"), plot)


@experiment.command("individual")
@_study_options
def experiment_individual(config_path, seed, fmt, output, plot):
    """Each task on its own network, no pruning."""
    rows = run_individual_baseline(load_config(config_path, seed))
    _write(rows, fmt, output or _default_output("individual", fmt), BaselineRow)
    if plot:
        visualizer = StudyVisualizer(rows)
        visualizer.write_html(visualizer.create_visualization("individual"), plot)


@cli.group()
def codec():
    """Ownership mask encoding."""


@codec.command("size")
@click.argument("params", type=int)
@click.argument("tasks", type=int)
@click.option("--with-free", is_flag=True, help="Count a FREE state too (the map is still open for new tasks).")
def codec_size(params, tasks, with_free):
    """
    Compact mask size for PARAMS weights fully shared by TASKS tasks.

    Once the last task is frozen every weight has an owner, so TASKS states
    suffice; --with-free sizes a map that still has FREE weights.
    """
    if params < 0 or not 1 <= tasks <= pp.MAX_TASKS:
        raise InputError(f"need params >= 0 and 1 <= tasks <= {pp.MAX_TASKS}, got {params}, {tasks}")
    states = tasks + 1 if with_free else tasks
    size = pp.overhead_bytes(params, states)
    fraction = size / (4 * params) if params else 0.0
    click.echo(f"states={states} bits_per_entry={pp.bits_for_states(states)} "
               f"overhead_bytes={size} fraction_of_weights={fraction:.6g}")


def run(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="tasknet", standalone_mode=False)
        return EXIT_OK
    except InvariantViolation as e:
        click.echo(f"Invariant violated: {str(e)}", err=True)
        return EXIT_INVARIANT
    except PackingError as e:
        click.echo(f"Error: {str(e)}", err=True)
        return EXIT_ERROR
    except click.ClickException as e:
        e.show()
        return EXIT_ERROR
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(run())
