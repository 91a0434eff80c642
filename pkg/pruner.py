"""
Weight pruning and parameter-budget accounting.

Magnitude pruning works on one layer at a time: among the eligible (FREE)
weights, the floor(ratio * E) smallest by absolute value are zeroed, ties
going to the smaller flat index.

Filter pruning removes whole output units instead. It needs a recorded
forward/backward pass (``record_filter_trace``) to rank filters by the
Taylor criterion, and it zeroes the weights that surviving filters read from
pruned ones, so the survivors' outputs no longer depend on whatever later
tasks learn in the freed slots.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DimensionError, InputError, OwnershipViolation, StateError
from packedparams import FREE, OwnershipMap
from tensorcore import Tape, Tensor, backward, softmax_xent

logger = logging.getLogger(__name__)

LEDGER_COLUMNS = ("owner", "parameters")


@dataclass
class PruneDecision:
    """Pruned flat indices (ascending) for one layer, with the counts behind them."""

    indices: np.ndarray
    eligible: int
    pruned: int
    retained: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.pruned != self.indices.size or self.pruned + self.retained != self.eligible:
            raise InputError(f"inconsistent decision: eligible={self.eligible}, "
                             f"pruned={self.pruned}, retained={self.retained}, indices={self.indices.size}")


@dataclass
class BudgetLedger:
    """Owned parameter count per task, plus the FREE remainder."""

    owned: Dict[int, int]
    free: int
    total: int

    def __post_init__(self):
        if sum(self.owned.values()) + self.free != self.total:
            raise InputError(f"ledger does not add up: owned={sum(self.owned.values())}, "
                             f"free={self.free}, total={self.total}")

    def to_rows(self) -> List[dict]:
        rows = [{"owner": f"task_{task}", "parameters": count} for task, count in sorted(self.owned.items())]
        rows.append({"owner": "free", "parameters": self.free})
        rows.append({"owner": "total", "parameters": self.total})
        return rows


def prune_count(ratio: float, eligible: int) -> int:
    return int(math.floor(ratio * eligible))


def _check_ratio(ratio):
    if not 0.0 <= ratio <= 1.0:
        raise InputError(f"pruning ratio must lie in [0, 1], got {ratio}")


def magnitude_select(values, eligible, ratio: float) -> PruneDecision:
    """Pick the floor(ratio * E) smallest-magnitude eligible entries of one layer."""
    _check_ratio(ratio)
    values = values.data if isinstance(values, Tensor) else np.asarray(values)
    eligible = np.asarray(eligible, dtype=bool)
    if eligible.size != values.size:
        raise DimensionError(f"eligibility mask of {eligible.size} entries for {values.size} values")

    candidates = np.flatnonzero(eligible.reshape(-1))
    count = prune_count(ratio, candidates.size)
    # candidates are ascending, so a stable sort breaks magnitude ties by index
    order = np.argsort(np.abs(values.reshape(-1)[candidates]), kind="stable")
    chosen = np.sort(candidates[order[:count]])
    return PruneDecision(indices=chosen, eligible=int(candidates.size),
                         pruned=int(count), retained=int(candidates.size - count))


def apply_prune(values, decision: PruneDecision):
    """Set the decided entries to exactly 0.0 in place."""
    array = values.data if isinstance(values, Tensor) else values
    array.reshape(-1)[decision.indices] = 0.0
    return values


def budget_report(ownership: OwnershipMap) -> BudgetLedger:
    counts = np.zeros(ownership.task_count + 1, dtype=np.int64)
    for layer in ownership.layers:
        counts += np.bincount(layer.reshape(-1), minlength=ownership.task_count + 1)[:ownership.task_count + 1]
    owned = {task: int(counts[task]) for task in range(1, ownership.task_count + 1)}
    return BudgetLedger(owned=owned, free=int(counts[FREE]), total=ownership.total_entries)


def project_budget(total: int, ratios: Sequence[float]) -> List[BudgetLedger]:
    """
    Ledger after each task of a ratio sequence, by counting alone.

    Task k trains every FREE weight and keeps the floor-complement of its
    pruning ratio; this is the single-layer view of ``budget_report``.
    """
    ledgers, owned, free = [], {}, total
    for task, ratio in enumerate(ratios, start=1):
        _check_ratio(ratio)
        released = prune_count(ratio, free)
        owned[task] = free - released
        free = released
        ledgers.append(BudgetLedger(owned=dict(owned), free=free, total=total))
    return ledgers


@dataclass
class FilterTrace:
    """Outputs of every prunable layer and their loss gradients for one batch."""

    task: int
    activations: List[np.ndarray]
    gradients: List[Optional[np.ndarray]] = field(default_factory=list)


def record_filter_trace(network, t: int, inputs, labels) -> FilterTrace:
    """Run a forward/backward pass for task t and keep per-filter activations and gradients."""
    tape = Tape()
    captured: List[Tensor] = []
    logits = network.forward(inputs, t, tape=tape, capture=captured)
    loss = softmax_xent(logits, labels, tape=tape)
    backward(tape, loss)
    trace = FilterTrace(
        task=t,
        activations=[out.data.copy() for out in captured],
        gradients=[None if out.grad is None else out.grad.copy() for out in captured],
    )
    network.filter_trace = trace
    return trace


def taylor_filter_scores(network, batch: Optional[Tuple] = None) -> List[np.ndarray]:
    """
    Per-filter importance, one array per prunable layer.

    score = |mean over batch and positions of activation * dloss/dactivation|,
    L2-normalized within the layer. ``batch`` is ``(task, inputs, labels)``;
    without it the network's last recorded trace is used.
    """
    if batch is not None:
        record_filter_trace(network, *batch)
    trace = getattr(network, "filter_trace", None)
    if trace is None or not trace.gradients or any(g is None for g in trace.gradients):
        raise StateError("filter scores need a recorded forward/backward pass")

    scores = []
    for activation, gradient in zip(trace.activations, trace.gradients):
        product = activation.astype(np.float64) * gradient.astype(np.float64)
        axes = (0,) if product.ndim == 2 else (0, 2, 3)
        layer_scores = np.abs(product.mean(axis=axes))
        norm = np.sqrt((layer_scores ** 2).sum())
        scores.append(layer_scores / norm if norm > 0 else layer_scores)
    return scores


def filter_is_free(ownership: OwnershipMap, layer: int, unit: int) -> bool:
    return bool(np.all(ownership.layers[layer][unit] == FREE))


def prunable_filters(network) -> List[Tuple[int, int]]:
    """(layer, unit) pairs the open task may still remove."""
    remaining = []
    for layer, owners in enumerate(network.ownership.layers):
        row_free = np.all(owners.reshape(owners.shape[0], -1) == FREE, axis=1)
        available = row_free & ~network.pruned_filters[layer]
        remaining.extend((layer, int(unit)) for unit in np.flatnonzero(available))
    return remaining


def _zero_filter(network, layer: int, unit: int):
    state = network.prunable_layer(layer)
    state.weight.data[unit] = 0.0
    network.locked[layer][unit] = False
    bias = network.bias_for(network.open_task_id(), layer)
    if bias is not None and network.bias_trainable(network.open_task_id()):
        bias.data[unit] = 0.0
    network.pruned_filters[layer][unit] = True


def _cut_readers(network, layer: int, unit: int):
    """Zero and lock the weights that surviving open-task filters read from a pruned unit."""
    consumer, span = network.consumer_of(layer)
    columns = slice(unit * span, (unit + 1) * span)
    if consumer is None:
        head = network.task(network.open_task_id())
        head.head_weight.data[:, columns] = 0.0
        head.head_locked[columns] = True
        return
    weight = network.prunable_layer(consumer).weight.data
    owners = network.ownership.layers[consumer]
    readers = ~network.pruned_filters[consumer]
    for row in np.flatnonzero(readers):
        free_entries = owners[row, columns] == FREE
        weight[row, columns][free_entries] = 0.0
        network.locked[consumer][row, columns] |= free_entries


def filter_prune_step(network, n_filters: int, filters: Optional[Sequence[Tuple[int, int]]] = None):
    """
    Remove ``n_filters`` of the open task's filters, lowest Taylor score first.

    An explicit ``filters`` list of (layer, unit) pairs bypasses scoring; every
    listed filter must be entirely FREE.
    """
    if filters is None:
        if n_filters == 0:
            return []
        remaining = prunable_filters(network)
        if not 0 <= n_filters < len(remaining):
            raise InputError(f"cannot prune {n_filters} filters, {len(remaining)} remain")
        scores = taylor_filter_scores(network)
        ranked = sorted(remaining, key=lambda pair: (scores[pair[0]][pair[1]], pair[0], pair[1]))
        filters = ranked[:n_filters]
    else:
        for layer, unit in filters:
            if not filter_is_free(network.ownership, layer, unit):
                raise OwnershipViolation(f"filter {unit} of prunable layer {layer} belongs to a prior task")
            if network.pruned_filters[layer][unit]:
                raise InputError(f"filter {unit} of prunable layer {layer} is already pruned")

    # consumers are cut only after every filter of this step is marked
    for layer, unit in filters:
        _zero_filter(network, layer, unit)
    for layer, unit in filters:
        _cut_readers(network, layer, unit)
    network.filter_trace = None
    logger.info("Pruned %d filters: %s", len(filters), list(filters))
    return list(filters)
