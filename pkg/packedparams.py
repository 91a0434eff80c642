"""
Per-parameter task ownership.

Every prunable weight carries a small owner index: ``FREE`` (0) while the
weight may still be trained or pruned, otherwise the 1-based id of the first
task that kept it. Owners are assigned once and never change, so the weights a
task sees at inference (owners 1..t) are exactly the weights it was frozen
with.

At runtime an owner is one byte per weight. On disk the map is bit-packed with
ceil(log2(states)) bits per entry, lowest index in the least-significant bits.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from errors import (CapacityError, DimensionError, FormatError, InputError,
                    OwnershipViolation, StateError, TaskLookupError)

logger = logging.getLogger(__name__)

FREE = 0
MAX_TASKS = 255
PHASES = ("training", "retraining")


class OwnershipMap:
    """One owner array per prunable layer, shaped like that layer's weight."""

    def __init__(self, layers: Sequence[np.ndarray], task_count: int = 0):
        self.layers = [np.ascontiguousarray(np.asarray(layer, dtype=np.uint8)) for layer in layers]
        highest = max((int(layer.max()) for layer in self.layers if layer.size), default=0)
        if highest > task_count:
            raise InputError(f"owner index {highest} exceeds task count {task_count}")
        self.task_count = task_count

    @classmethod
    def empty(cls, shapes: Iterable[Sequence[int]]):
        return cls([np.zeros(tuple(shape), dtype=np.uint8) for shape in shapes])

    @classmethod
    def from_owners(cls, *owners):
        """Build a map from owner lists, one per layer; the task count is the highest owner."""
        layers = [np.asarray(values, dtype=np.uint8) for values in owners]
        highest = max((int(layer.max()) for layer in layers if layer.size), default=0)
        return cls(layers, task_count=highest)

    def register_task(self) -> int:
        if self.task_count >= MAX_TASKS:
            raise CapacityError(f"ownership map holds at most {MAX_TASKS} tasks")
        self.task_count += 1
        return self.task_count

    def check_task(self, t: int):
        if not 1 <= t <= self.task_count:
            raise TaskLookupError(f"task {t} is not registered (tasks 1..{self.task_count})")

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [layer.shape for layer in self.layers]

    @property
    def total_entries(self) -> int:
        return int(sum(layer.size for layer in self.layers))

    def free_count(self) -> int:
        return int(sum(np.count_nonzero(layer == FREE) for layer in self.layers))

    def copy(self):
        return OwnershipMap([layer.copy() for layer in self.layers], self.task_count)

    def __eq__(self, other):
        if not isinstance(other, OwnershipMap):
            return NotImplemented
        return (self.task_count == other.task_count
                and len(self.layers) == len(other.layers)
                and all(a.shape == b.shape and np.array_equal(a, b)
                        for a, b in zip(self.layers, other.layers)))

    def __repr__(self):
        return f"OwnershipMap(layers={self.shapes}, tasks={self.task_count})"


def inference_mask(ownership: OwnershipMap, t: int) -> List[np.ndarray]:
    """Weights active when serving task t: owners 1..t."""
    ownership.check_task(t)
    return [(layer != FREE) & (layer <= t) for layer in ownership.layers]


def _check_uncommitted(ownership: OwnershipMap, t: int):
    ownership.check_task(t)
    for index, layer in enumerate(ownership.layers):
        if np.any(layer >= t):
            raise StateError(f"task {t} can no longer train: layer {index} already holds "
                             f"weights owned by task {int(layer.max())}")


def training_active_mask(ownership: OwnershipMap, t: int) -> List[np.ndarray]:
    """Weights seen by the forward pass while task t trains: prior-task weights plus FREE."""
    _check_uncommitted(ownership, t)
    return [layer < t for layer in ownership.layers]


def update_mask(ownership: OwnershipMap, t: int, phase: str) -> List[np.ndarray]:
    """Weights task t may modify: FREE ones while training, its own survivors while retraining."""
    if phase not in PHASES:
        raise InputError(f"phase '{phase}' not in {PHASES}")
    if phase == "training":
        _check_uncommitted(ownership, t)
        return [layer == FREE for layer in ownership.layers]
    ownership.check_task(t)
    return [layer == t for layer in ownership.layers]


def _as_flat_indices(selection, size):
    selection = np.asarray(selection)
    if selection.dtype == bool:
        if selection.size != size:
            raise DimensionError(f"survivor mask of {selection.size} entries for a layer of {size}")
        return np.flatnonzero(selection)
    selection = selection.astype(np.int64).reshape(-1)
    if selection.size and (selection.min() < 0 or selection.max() >= size):
        raise DimensionError(f"survivor index out of range for a layer of {size} entries")
    return selection


def commit_survivors(ownership: OwnershipMap, t: int, survivors: Sequence):
    """
    Assign owner t to the given FREE entries.

    ``survivors`` holds one entry per layer: flat indices or a boolean mask.
    Nothing is written unless every selected entry is FREE.
    """
    ownership.check_task(t)
    if len(survivors) != len(ownership.layers):
        raise DimensionError(f"{len(survivors)} survivor sets for {len(ownership.layers)} layers")
    resolved = []
    for index, (layer, selection) in enumerate(zip(ownership.layers, survivors)):
        flat = _as_flat_indices(selection, layer.size)
        owners = layer.reshape(-1)[flat]
        taken = flat[owners != FREE]
        if taken.size:
            raise OwnershipViolation(
                f"layer {index}: cannot commit index {int(taken[0])} to task {t}, "
                f"it is owned by task {int(layer.reshape(-1)[taken[0]])}"
            )
        resolved.append(flat)
    for layer, flat in zip(ownership.layers, resolved):
        layer.reshape(-1)[flat] = t
    logger.debug("Committed %d weights to task %d", sum(flat.size for flat in resolved), t)


def bits_for_states(state_count: int) -> int:
    """ceil(log2(state_count)), at least 1."""
    return max(1, (max(state_count, 1) - 1).bit_length())


def overhead_bytes(param_count: int, state_count: int) -> int:
    """Bytes needed to store ``param_count`` owner entries in compact form."""
    return (param_count * bits_for_states(state_count) + 7) // 8


@dataclass(frozen=True)
class EncodedMask:
    """
    Bit-packed ownership map.

    ``states`` lists the owner value behind each code (ascending, FREE first
    when present); ``layer_shapes`` and ``task_count`` let decode rebuild the
    map exactly.
    """

    bits_per_entry: int
    state_count: int
    data: bytes
    entry_count: int
    states: Tuple[int, ...]
    layer_shapes: Tuple[Tuple[int, ...], ...]
    task_count: int

    @property
    def byte_length(self) -> int:
        return len(self.data)


def encode(ownership: OwnershipMap) -> EncodedMask:
    flat = (np.concatenate([layer.reshape(-1) for layer in ownership.layers])
            if ownership.layers else np.zeros(0, dtype=np.uint8))
    states = np.unique(flat)
    bits = bits_for_states(len(states))
    codes = np.searchsorted(states, flat).astype(np.uint8)
    planes = ((codes[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    packed = np.packbits(planes.reshape(-1), bitorder="little")
    return EncodedMask(
        bits_per_entry=bits,
        state_count=int(len(states)),
        data=packed.tobytes(),
        entry_count=int(flat.size),
        states=tuple(int(s) for s in states),
        layer_shapes=tuple(tuple(shape) for shape in ownership.shapes),
        task_count=ownership.task_count,
    )


def decode(encoded: EncodedMask) -> OwnershipMap:
    bits = encoded.bits_per_entry
    if bits != bits_for_states(encoded.state_count):
        raise FormatError(f"{bits} bits per entry do not match {encoded.state_count} states")
    if len(encoded.states) != encoded.state_count:
        raise FormatError(f"state table has {len(encoded.states)} entries, header says {encoded.state_count}")
    available = len(encoded.data) * 8
    if encoded.entry_count * bits > available:
        raise FormatError(f"{encoded.entry_count} entries of {bits} bits need "
                          f"{encoded.entry_count * bits} bits, stream holds {available}")
    declared = sum(int(np.prod(shape)) for shape in encoded.layer_shapes)
    if declared != encoded.entry_count:
        raise FormatError(f"layer shapes cover {declared} entries, header says {encoded.entry_count}")

    raw = np.frombuffer(encoded.data, dtype=np.uint8)
    planes = np.unpackbits(raw, count=encoded.entry_count * bits, bitorder="little")
    weights = (1 << np.arange(bits, dtype=np.uint16))
    codes = (planes.reshape(encoded.entry_count, bits).astype(np.uint16) * weights).sum(axis=1)
    if codes.size and codes.max() >= max(encoded.state_count, 1):
        raise FormatError(f"code {int(codes.max())} outside {encoded.state_count} states")
    lookup = np.asarray(encoded.states if encoded.states else (FREE,), dtype=np.uint8)
    flat = lookup[codes]

    layers, start = [], 0
    for shape in encoded.layer_shapes:
        size = int(np.prod(shape))
        layers.append(flat[start:start + size].reshape(shape).copy())
        start += size
    try:
        return OwnershipMap(layers, task_count=encoded.task_count)
    except InputError as e:
        raise FormatError(f"decoded map is inconsistent: {str(e)}") from e
