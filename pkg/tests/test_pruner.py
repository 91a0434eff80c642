import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import packedparams as pp
from conftest import TINY_SHAPE, tiny_backbone
from errors import InputError, OwnershipViolation, StateError
from lifecycle import (PackedNetwork, TrainSchedule, add_task, infer, prune_task_filters, retrain_task,
                       train_task)
from pruner import (BudgetLedger, apply_prune, budget_report, filter_prune_step, magnitude_select,
                    project_budget, prune_count, prunable_filters, record_filter_trace,
                    taylor_filter_scores)


def oracle(values, eligible, ratio):
    candidates = [i for i in range(len(values)) if eligible[i]]
    ranked = sorted(candidates, key=lambda i: (abs(values[i]), i))
    return sorted(ranked[:int(np.floor(ratio * len(candidates)))])


def test_magnitude_select_example():
    decision = magnitude_select(np.array([0.9, -0.1, 0.5, 0.05, -0.7, 0.3]), [True] * 6, 0.5)
    assert decision.indices.tolist() == [1, 3, 5]
    assert (decision.eligible, decision.pruned, decision.retained) == (6, 3, 3)


def test_magnitude_select_skips_ineligible():
    decision = magnitude_select(np.array([0.9, -0.1, 0.5, 0.05]), [True, False, True, False], 0.5)
    assert decision.indices.tolist() == [2]


def test_magnitude_select_tie_break_by_index():
    decision = magnitude_select(np.array([0.2, -0.2, 0.2, 0.2]), [True] * 4, 0.5)
    assert decision.indices.tolist() == [0, 1]


@pytest.mark.parametrize("ratio, pruned", [(0.0, 0), (1.0, 6), (0.75, 4)])
def test_magnitude_select_ratio_edges(ratio, pruned):
    assert magnitude_select(np.arange(6.0), [True] * 6, ratio).pruned == pruned


def test_magnitude_select_rejects_bad_ratio():
    with pytest.raises(InputError):
        magnitude_select(np.arange(3.0), [True] * 3, 1.5)


def test_magnitude_select_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        size = int(rng.integers(1, 40))
        # coarse values so ties are common
        values = rng.integers(-5, 6, size=size) / 4.0
        eligible = rng.random(size) < 0.7
        ratio = float(rng.choice([0.0, 0.25, 0.5, 0.75, 0.9, 1.0, rng.random()]))
        decision = magnitude_select(values, eligible, ratio)
        assert decision.pruned == prune_count(ratio, int(eligible.sum()))
        assert np.all(eligible[decision.indices])
        assert decision.indices.tolist() == oracle(values, eligible, ratio)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.integers(1, 30), elements=st.floats(-4, 4, width=32)),
       st.floats(0, 1), st.data())
def test_apply_prune_zeroes_exactly_the_decision(values, ratio, data):
    eligible = data.draw(arrays(bool, values.size))
    decision = magnitude_select(values, eligible, ratio)
    pruned = apply_prune(values.copy(), decision)
    assert np.all(pruned[decision.indices] == 0)
    untouched = np.setdiff1d(np.arange(values.size), decision.indices)
    assert np.array_equal(pruned[untouched], values[untouched])


def test_budget_report_counts_owners():
    ledger = budget_report(pp.OwnershipMap.from_owners([0, 1, 1, 2], [2, 0]))
    assert ledger.owned == {1: 2, 2: 2}
    assert (ledger.free, ledger.total) == (2, 6)
    assert [row["owner"] for row in ledger.to_rows()] == ["task_1", "task_2", "free", "total"]


def test_budget_ledger_must_add_up():
    with pytest.raises(InputError):
        BudgetLedger(owned={1: 3}, free=2, total=6)


def test_published_budget_arithmetic():
    ledgers = project_budget(134_000_000, [0.50, 0.75, 0.75])
    assert ledgers[0].free == 67_000_000
    assert (ledgers[1].owned[2], ledgers[1].free) == (16_750_000, 50_250_000)
    assert (ledgers[2].owned[3], ledgers[2].free) == (12_562_500, 37_687_500)


def test_project_budget_agrees_with_a_real_map():
    ownership = pp.OwnershipMap.empty([(1000,)])
    for ratio in (0.5, 0.75):
        t = ownership.register_task()
        free = np.flatnonzero(ownership.layers[0] == pp.FREE)
        keep = free[prune_count(ratio, free.size):]
        pp.commit_survivors(ownership, t, [keep])
    projected = project_budget(1000, [0.5, 0.75])[-1]
    actual = budget_report(ownership)
    assert (projected.owned, projected.free) == (actual.owned, actual.free)


def _trained_first_task(datasets, schedule):
    net = PackedNetwork(tiny_backbone(), TINY_SHAPE, seed=1)
    x_train, y_train, _, _ = datasets[0]
    t = add_task(net, "first", 3)
    train_task(net, t, x_train, y_train, schedule)
    return net, t


def test_taylor_scores_need_a_trace(datasets, schedule):
    net, _ = _trained_first_task(datasets, schedule)
    with pytest.raises(StateError):
        taylor_filter_scores(net)


def test_taylor_scores_are_normalized(datasets, schedule):
    net, t = _trained_first_task(datasets, schedule)
    x_train, y_train, _, _ = datasets[0]
    scores = taylor_filter_scores(net, (t, x_train[:32], y_train[:32]))
    assert [s.size for s in scores] == [4, 16]
    for layer_scores in scores:
        assert np.all(layer_scores >= 0)
        assert np.linalg.norm(layer_scores) == pytest.approx(1.0, abs=1e-9)


def test_taylor_scores_match_a_float64_recomputation(datasets, schedule):
    net, t = _trained_first_task(datasets, schedule)
    x_train, y_train, _, _ = datasets[0]
    scores = taylor_filter_scores(net, (t, x_train[:32], y_train[:32]))
    trace = net.filter_trace
    for activation, gradient, layer_scores in zip(trace.activations, trace.gradients, scores):
        expected = np.array([abs(np.mean(activation[:, u].astype(np.float64) * gradient[:, u].astype(np.float64)))
                             for u in range(activation.shape[1])])
        expected /= np.sqrt(np.sum(expected ** 2))
        assert np.allclose(layer_scores, expected, rtol=0, atol=1e-6)


def test_silent_filter_scores_zero(tiny_net, datasets):
    x_train, y_train, _, _ = datasets[0]
    t = add_task(tiny_net, "first", 3)
    tiny_net.prunable_layer(0).weight.data[0] = 0.0
    tiny_net.bias_for(t, 0).data[0] = 0.0
    scores = taylor_filter_scores(tiny_net, (t, x_train[:16], y_train[:16]))
    assert not np.any(tiny_net.filter_trace.activations[0][:, 0])
    assert scores[0][0] == 0.0
    assert np.all(scores[0][1:] >= 0)


def test_filter_prune_step_rejects_owned_filters(packed_net):
    net, _ = packed_net
    net = copy.deepcopy(net)
    add_task(net, "extra", 3)
    owned = [(layer, int(unit)) for layer, owners in enumerate(net.ownership.layers)
             for unit in range(owners.shape[0]) if np.any(owners[unit] != pp.FREE)]
    with pytest.raises(OwnershipViolation):
        filter_prune_step(net, 1, filters=owned[:1])


def test_filter_prune_step_count_limit(datasets, schedule):
    net, t = _trained_first_task(datasets, schedule)
    x_train, y_train, _, _ = datasets[0]
    record_filter_trace(net, t, x_train[:16], y_train[:16])
    with pytest.raises(InputError):
        filter_prune_step(net, len(prunable_filters(net)))


def test_filter_prune_zeroes_filter_and_readers(datasets, schedule):
    net, t = _trained_first_task(datasets, schedule)
    x_train, y_train, _, _ = datasets[0]
    record_filter_trace(net, t, x_train[:16], y_train[:16])
    removed = filter_prune_step(net, 2)
    assert len(removed) == 2
    for layer, unit in removed:
        assert np.all(net.prunable_layer(layer).weight.data[unit] == 0)
        assert net.pruned_filters[layer][unit]
        consumer, span = net.consumer_of(layer)
        columns = slice(unit * span, (unit + 1) * span)
        if consumer is None:
            assert np.all(net.task(t).head_weight.data[:, columns] == 0)
        else:
            assert np.all(net.prunable_layer(consumer).weight.data[:, columns][~net.pruned_filters[consumer]] == 0)


def test_filter_pruning_keeps_first_task_separable(datasets, schedule, probes):
    """After filter pruning, the unmasked network still serves the first task exactly."""
    net = PackedNetwork(tiny_backbone(), TINY_SHAPE, seed=2)
    (x1, y1, _, _), (x2, y2, _, _) = datasets[0], datasets[1]
    t1 = add_task(net, "first", 3)
    train_task(net, t1, x1, y1, schedule)
    prune_task_filters(net, t1, x1, y1, n_filters=3, steps=2)
    retrain_task(net, t1, x1, y1, schedule)

    t2 = add_task(net, "second", 3)
    train_task(net, t2, x2, y2, TrainSchedule(epochs=2, lr=0.1, retrain_epochs=1, batch_size=16))
    prune_task_filters(net, t2, x2, y2, n_filters=2, steps=1)
    retrain_task(net, t2, x2, y2, schedule)

    masked = infer(net, t1, probes, masked=True)
    unmasked = infer(net, t1, probes, masked=False)
    assert np.array_equal(masked, unmasked)
