import json

import numpy as np
import pytest
from click.testing import CliRunner

import app
import checkpointio
from conftest import TINY_SHAPE, tiny_config
from errors import OwnershipViolation


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config(task_count=2).to_dict()), encoding="utf-8")
    return str(path)


@pytest.fixture(autouse=True)
def output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("TASKNET_OUTPUT_DIR", str(tmp_path / "results"))
    return tmp_path / "results"


@pytest.mark.parametrize("tasks, expected", [
    ("4", "states=4 bits_per_entry=2 overhead_bytes=33500000 fraction_of_weights=0.0625"),
    ("2", "states=2 bits_per_entry=1 overhead_bytes=16750000 fraction_of_weights=0.03125"),
])
def test_codec_size_of_a_fully_packed_map(capsys, tasks, expected):
    assert app.run(["codec", "size", "134000000", tasks]) == app.EXIT_OK
    assert capsys.readouterr().out.strip() == expected


def test_codec_size_with_free_state(capsys):
    assert app.run(["codec", "size", "1000", "4", "--with-free"]) == app.EXIT_OK
    assert capsys.readouterr().out.strip() == \
        "states=5 bits_per_entry=3 overhead_bytes=375 fraction_of_weights=0.09375"


def test_codec_size_rejects_zero_tasks(capsys):
    assert app.run(["codec", "size", "1000", "0"]) == app.EXIT_ERROR
    assert "Error" in capsys.readouterr().err


def test_single_network_flow(tmp_path, config_file, capsys):
    ckpt = str(tmp_path / "net.tnet")
    assert app.run(["init", ckpt, "--config", config_file]) == app.EXIT_OK
    assert app.run(["add-task", ckpt, "task_a", "--config", config_file]) == app.EXIT_OK
    assert "Added task 1" in capsys.readouterr().out
    assert app.run(["train", ckpt, "1", "--config", config_file]) == app.EXIT_OK
    assert app.run(["prune", ckpt, "1", "--ratio", "0.5"]) == app.EXIT_OK
    assert app.run(["retrain", ckpt, "1", "--config", config_file]) == app.EXIT_OK
    assert "frozen" in capsys.readouterr().out
    assert checkpointio.load(ckpt).task(1).state == "frozen"

    assert app.run(["infer", ckpt, "1", "--config", config_file]) == app.EXIT_OK
    assert "eval error" in capsys.readouterr().out

    inputs = tmp_path / "inputs.npy"
    np.save(inputs, np.random.default_rng(0).standard_normal((5,) + TINY_SHAPE).astype(np.float32))
    assert app.run(["infer", ckpt, "1", "--inputs", str(inputs)]) == app.EXIT_OK
    labels = [int(line) for line in capsys.readouterr().out.split()]
    assert len(labels) == 5 and all(0 <= label < 3 for label in labels)

    assert app.run(["report", ckpt]) == app.EXIT_OK
    text = capsys.readouterr().out
    assert text.startswith("owner,parameters\n")
    assert "task_1," in text and "free," in text and "mask_overhead_bytes," in text

    dense = str(tmp_path / "task1.tnet")
    assert app.run(["export", ckpt, "1", dense]) == app.EXIT_OK
    assert len(checkpointio.load(dense).tasks) == 1


def test_lifecycle_errors_exit_one(tmp_path, config_file, capsys):
    ckpt = str(tmp_path / "net.tnet")
    app.run(["init", ckpt, "--config", config_file])
    assert app.run(["add-task", ckpt, "unknown", "--config", config_file]) == app.EXIT_ERROR
    assert app.run(["retrain", ckpt, "1", "--config", config_file]) == app.EXIT_ERROR
    assert "Error" in capsys.readouterr().err


def test_usage_errors_exit_one(tmp_path):
    assert app.run(["no-such-command"]) == app.EXIT_ERROR
    assert app.run(["report", str(tmp_path / "missing.tnet")]) == app.EXIT_ERROR


def test_invariant_violations_exit_two(tmp_path, config_file, monkeypatch, capsys):
    ckpt = str(tmp_path / "net.tnet")
    app.run(["init", ckpt, "--config", config_file])
    app.run(["add-task", ckpt, "task_a", "--config", config_file])

    def broken(net, t, ratio):
        raise OwnershipViolation("weight owned by task 1")

    monkeypatch.setattr(app, "prune_task", broken)
    assert app.run(["prune", ckpt, "1"]) == app.EXIT_INVARIANT
    assert "Invariant violated" in capsys.readouterr().err


def test_experiment_run_is_reproducible(tmp_path, config_file):
    first, second = tmp_path / "first.csv", tmp_path / "second.csv"
    assert app.run(["experiment", "run", config_file, "--output", str(first)]) == app.EXIT_OK
    assert app.run(["experiment", "run", config_file, "--output", str(second),
                    "--plot", str(tmp_path / "trace.html")]) == app.EXIT_OK
    assert first.read_bytes() == second.read_bytes()
    assert (tmp_path / "first_forgetting.csv").read_bytes() == (tmp_path / "second_forgetting.csv").read_bytes()
    assert (tmp_path / "trace.html").exists()
    assert "wall_time" not in first.read_text(encoding="utf-8").splitlines()[0]


def test_experiment_default_output_dir(config_file, output_dir):
    assert app.run(["experiment", "individual", config_file, "--format", "json"]) == app.EXIT_OK
    payload = json.loads((output_dir / "individual.json").read_text(encoding="utf-8"))
    assert [row["task"] for row in payload["rows"]] == ["task_a", "task_b"]


def test_bad_config_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"seeds": [0], "learning_rate": 1}', encoding="utf-8")
    assert app.run(["experiment", "run", str(path)]) == app.EXIT_ERROR


def test_help():
    result = CliRunner().invoke(app.cli, ["--help"])
    assert result.exit_code == 0
    assert "experiment" in result.output and "codec" in result.output
