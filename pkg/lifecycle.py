"""
Task lifecycle controller.

Each task moves through ``training -> pruned_retraining -> frozen``:

* ``train_task``   masked SGD on FREE weights; prior tasks' weights are read
                   but never written.
* ``prune_task``   magnitude-prunes the FREE weights, commits the survivors to
                   the task. ``prune_task_filters`` is the filter-level variant.
* ``retrain_task`` updates only the task's own survivors, then freezes it.
                   After task 1 freezes, biases and batch-norm are frozen too.

``infer`` masks the shared weights down to owners 1..t, which reproduces the
network exactly as it was when task t froze.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

import packedparams as pp
from errors import CapacityError, DimensionError, InputError, StateError, TaskLookupError
from pruner import (PruneDecision, apply_prune, filter_prune_step, magnitude_select,
                    record_filter_trace)
from tensorcore import (LayerSpec, Tape, Tensor, backward, batchnorm_forward, conv2d_forward,
                        conv_output_size, flatten, linear_forward, mask_weights, maxpool2x2,
                        relu, sgd_masked_step, softmax_xent)

logger = logging.getLogger(__name__)

TASK_STATES = ("training", "pruned_retraining", "frozen")


@dataclass
class TrainSchedule:
    """Train ``epochs`` at ``lr`` with one decay step; retrain at a constant, smaller rate."""

    epochs: int = 4
    lr: float = 0.05
    decay_factor: float = 0.1
    decay_epoch: Optional[int] = None
    retrain_epochs: int = 2
    retrain_lr: Optional[float] = None
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 0 or self.retrain_epochs < 0:
            raise InputError(f"epochs must be non-negative, got {self.epochs}/{self.retrain_epochs}")
        if self.retrain_epochs > self.epochs:
            raise InputError(f"retrain_epochs ({self.retrain_epochs}) exceeds epochs ({self.epochs})")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be positive, got {self.batch_size}")
        if self.decay_epoch is None:
            self.decay_epoch = self.epochs // 2
        if self.retrain_lr is None:
            self.retrain_lr = self.lr * self.decay_factor

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor if epoch >= self.decay_epoch > 0 else self.lr

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


@dataclass
class TaskRecord:
    id: int
    name: str
    class_count: int
    head_weight: Tensor
    head_bias: Tensor
    head_locked: np.ndarray
    state: str = "training"
    ratio: Optional[float] = None
    biases: Optional[List[Optional[Tensor]]] = None

    def advance(self, expected: str, new_state: str):
        if self.state != expected:
            raise StateError(f"task {self.id} ('{self.name}') is {self.state}, expected {expected}")
        self.state = new_state


@dataclass
class LayerState:
    spec: LayerSpec
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None
    gain: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None


def desk_backbone(input_shape=(1, 20, 20), hidden: int = 64) -> List[LayerSpec]:
    """conv-BN-ReLU-pool x2, then one hidden linear layer; heads are added per task."""
    channels, height, width = input_shape
    flat = 16 * (height // 4) * (width // 4)
    return [
        LayerSpec("conv2d", "conv1", channels, 8, kernel_size=3, padding=1),
        LayerSpec("batchnorm", "bn1", 8),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool2x2", "pool1"),
        LayerSpec("conv2d", "conv2", 8, 16, kernel_size=3, padding=1),
        LayerSpec("batchnorm", "bn2", 16),
        LayerSpec("relu", "relu2"),
        LayerSpec("maxpool2x2", "pool2"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("linear", "fc1", flat, hidden),
        LayerSpec("relu", "relu3"),
    ]


def infer_shapes(backbone: Sequence[LayerSpec], input_shape) -> List[Tuple[int, ...]]:
    """Per-sample output shape after every layer."""
    shape, shapes = tuple(input_shape), []
    for spec in backbone:
        if spec.kind == "conv2d":
            if len(shape) != 3 or shape[0] != spec.in_features:
                raise DimensionError(f"{spec.name}: expects {spec.in_features} channels, gets {shape}")
            shape = (spec.out_features,
                     conv_output_size(shape[1], spec.kernel_size, spec.stride, spec.padding),
                     conv_output_size(shape[2], spec.kernel_size, spec.stride, spec.padding))
        elif spec.kind == "linear":
            if len(shape) != 1 or shape[0] != spec.in_features:
                raise DimensionError(f"{spec.name}: expects {spec.in_features} features, gets {shape}")
            shape = (spec.out_features,)
        elif spec.kind == "batchnorm":
            if shape[0] != spec.in_features:
                raise DimensionError(f"{spec.name}: expects {spec.in_features} channels, gets {shape}")
        elif spec.kind == "maxpool2x2":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise DimensionError(f"{spec.name}: needs even spatial dims, gets {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    return shapes


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class PackedNetwork:
    """Shared backbone, ownership map, task table and freeze flags."""

    def __init__(self, backbone: Sequence[LayerSpec], input_shape=(1, 20, 20), seed: int = 0,
                 separate_bias: bool = False, initialize: bool = True):
        self.backbone = list(backbone)
        self.input_shape = tuple(input_shape)
        self.shapes = infer_shapes(self.backbone, self.input_shape)
        if len(self.shapes[-1]) != 1:
            raise DimensionError(f"backbone must end in a flat feature vector, ends in {self.shapes[-1]}")
        self.seed = seed
        self.separate_bias = separate_bias
        self.biases_frozen = False
        self.batchnorm_frozen = False
        self.tasks: List[TaskRecord] = []
        self.filter_trace = None

        rng = np.random.default_rng(seed)
        self.layers: List[LayerState] = []
        for spec in self.backbone:
            state = LayerState(spec)
            if spec.prunable:
                fan_in = int(np.prod(spec.weight_shape[1:]))
                if initialize:
                    state.weight = Tensor(_uniform(rng, spec.weight_shape, fan_in))
                    state.bias = Tensor(_uniform(rng, (spec.out_features,), fan_in)) if spec.has_bias else None
                else:
                    state.weight = Tensor(np.zeros(spec.weight_shape))
                    state.bias = Tensor(np.zeros(spec.out_features)) if spec.has_bias else None
            elif spec.kind == "batchnorm":
                state.gain = Tensor(np.ones(spec.in_features))
                state.beta = Tensor(np.zeros(spec.in_features))
                state.running_mean = np.zeros(spec.in_features, dtype=np.float32)
                state.running_var = np.ones(spec.in_features, dtype=np.float32)
            self.layers.append(state)

        self.prunable_positions = [i for i, spec in enumerate(self.backbone) if spec.prunable]
        shapes = [self.backbone[i].weight_shape for i in self.prunable_positions]
        self.ownership = pp.OwnershipMap.empty(shapes)
        self.locked = [np.zeros(shape, dtype=bool) for shape in shapes]
        self.pruned_filters = [np.zeros(shape[0], dtype=bool) for shape in shapes]

    @property
    def feature_count(self) -> int:
        return self.shapes[-1][0]

    @property
    def prunable_count(self) -> int:
        return self.ownership.total_entries

    def prunable_layer(self, index: int) -> LayerState:
        return self.layers[self.prunable_positions[index]]

    def task(self, t: int) -> TaskRecord:
        if not 1 <= t <= len(self.tasks):
            raise TaskLookupError(f"task {t} is not registered (tasks 1..{len(self.tasks)})")
        return self.tasks[t - 1]

    def open_task_id(self) -> Optional[int]:
        for record in self.tasks:
            if record.state != "frozen":
                return record.id
        return None

    def bias_for(self, t: Optional[int], index: int) -> Optional[Tensor]:
        if self.separate_bias and t is not None:
            return self.task(t).biases[index]
        return self.prunable_layer(index).bias

    def bias_trainable(self, t: Optional[int]) -> bool:
        if self.separate_bias:
            return t is not None and self.task(t).state != "frozen"
        return not self.biases_frozen

    def consumer_of(self, index: int) -> Tuple[Optional[int], int]:
        """
        Next prunable layer reading this layer's units, and how many of its
        input columns each unit feeds. ``None`` means the task heads.
        """
        if index + 1 < len(self.prunable_positions):
            position = self.prunable_positions[index]
            consumer = self.prunable_positions[index + 1]
            channels = self.backbone[position].out_features
            return index + 1, self.backbone[consumer].in_features // channels
        channels = self.backbone[self.prunable_positions[index]].out_features
        return None, self.feature_count // channels

    def task_masks(self, t: int) -> List[np.ndarray]:
        """Weight masks matching task t's view: its training view while open, its frozen view after."""
        record = self.task(t)
        if record.state == "training":
            return pp.training_active_mask(self.ownership, t)
        return pp.inference_mask(self.ownership, t)

    def forward(self, inputs, t: int, masks="task", bn_mode: str = "eval", tape: Optional[Tape] = None,
                capture: Optional[list] = None) -> Tensor:
        """
        Logits of task t's head.

        ``masks="task"`` applies the task's view, ``None`` runs the full unmasked
        network, or pass explicit per-layer masks.
        """
        record = self.task(t)
        if masks == "task":
            masks = self.task_masks(t)
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        if list(x.shape[1:]) != list(self.input_shape):
            raise DimensionError(f"input shape {x.shape} does not match network input {list(self.input_shape)}")

        prunable = 0
        for state in self.layers:
            kind = state.spec.kind
            if state.spec.prunable:
                weight = state.weight if masks is None else mask_weights(state.weight, masks[prunable], tape)
                bias = self.bias_for(t, prunable)
                if kind == "conv2d":
                    x = conv2d_forward(x, weight, bias, state.spec.stride, state.spec.padding, tape)
                else:
                    x = linear_forward(x, weight, bias, tape)
                if capture is not None:
                    capture.append(x)
                prunable += 1
            elif kind == "batchnorm":
                x = batchnorm_forward(x, state.gain, state.beta, state.running_mean, state.running_var,
                                      mode=bn_mode, tape=tape)
            elif kind == "relu":
                x = relu(x, tape)
            elif kind == "maxpool2x2":
                x = maxpool2x2(x, tape)
            elif kind == "flatten":
                x = flatten(x, tape)
        return linear_forward(x, record.head_weight, record.head_bias, tape)

    def parameter_count(self) -> int:
        total = 0
        for state in self.layers:
            for tensor in (state.weight, state.bias, state.gain, state.beta):
                if tensor is not None:
                    total += tensor.size
        return total

    def __repr__(self):
        return (f"PackedNetwork(layers={[spec.name or spec.kind for spec in self.backbone]}, "
                f"tasks={[(r.id, r.name, r.state) for r in self.tasks]})")


def add_task(net: PackedNetwork, name: str, class_count: int) -> int:
    """Register a new task with a freshly initialized private head."""
    open_task = net.open_task_id()
    if open_task is not None:
        raise StateError(f"task {open_task} must be frozen before adding '{name}'")
    if class_count < 2:
        raise InputError(f"task '{name}' needs at least 2 classes, got {class_count}")
    if net.ownership.free_count() == 0:
        raise CapacityError("no more free parameters are available")

    t = net.ownership.register_task()
    rng = np.random.default_rng([net.seed, t])
    head_weight = Tensor(_uniform(rng, (class_count, net.feature_count), net.feature_count))
    head_bias = Tensor(_uniform(rng, (class_count,), net.feature_count))
    biases = None
    if net.separate_bias:
        source = net.tasks[-1].biases if net.tasks else [net.prunable_layer(i).bias
                                                          for i in range(len(net.prunable_positions))]
        biases = [None if b is None else b.copy() for b in source]
    net.tasks.append(TaskRecord(t, name, class_count, head_weight, head_bias,
                                head_locked=np.zeros(net.feature_count, dtype=bool), biases=biases))
    net.pruned_filters = [np.zeros_like(p) for p in net.pruned_filters]
    net.filter_trace = None
    logger.info("Added task %d ('%s', %d classes)", t, name, class_count)
    return t


def _check_dataset(inputs, labels, class_count: Optional[int] = None):
    if len(inputs) == 0 or len(labels) == 0:
        raise InputError("dataset is empty")
    if len(inputs) != len(labels):
        raise DimensionError(f"{len(inputs)} inputs but {len(labels)} labels")
    if class_count is not None:
        values = np.asarray(labels)
        if values.min() < 0 or values.max() >= class_count:
            raise InputError(f"labels must lie in [0, {class_count}), got range [{values.min()}, {values.max()}]")


def _batches(net, t, epoch, count, batch_size, salt):
    order = np.random.default_rng([net.seed, t, salt, epoch]).permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def _sgd_step(net: PackedNetwork, t: int, inputs, labels, lr: float, forward_masks, weight_masks,
              layer_trainable: List[bool]) -> float:
    record = net.task(t)
    bias_trainable = net.bias_trainable(t)
    bn_trainable = not net.batchnorm_frozen
    bn_mode = "train" if bn_trainable else "frozen"

    params = [record.head_weight, record.head_bias]
    for index in range(len(net.prunable_positions)):
        params.append(net.prunable_layer(index).weight)
        bias = net.bias_for(t, index)
        if bias is not None:
            params.append(bias)
    for state in net.layers:
        if state.gain is not None:
            params.extend((state.gain, state.beta))
    for param in params:
        param.zero_grad()

    tape = Tape()
    logits = net.forward(inputs, t, masks=forward_masks, bn_mode=bn_mode, tape=tape)
    loss = softmax_xent(logits, labels, tape=tape)
    backward(tape, loss)

    head_mask = np.broadcast_to(~record.head_locked, record.head_weight.data.shape)
    sgd_masked_step(record.head_weight, record.head_weight.grad, lr, head_mask)
    sgd_masked_step(record.head_bias, record.head_bias.grad, lr, np.ones(record.class_count, dtype=bool))
    for index, mask in enumerate(weight_masks):
        state = net.prunable_layer(index)
        sgd_masked_step(state.weight, state.weight.grad, lr, mask)
        bias = net.bias_for(t, index)
        if bias is not None and bias_trainable and layer_trainable[index]:
            sgd_masked_step(bias, bias.grad, lr, ~net.pruned_filters[index])
    if bn_trainable:
        for state in net.layers:
            if state.gain is not None:
                keep = np.ones(state.gain.size, dtype=bool)
                sgd_masked_step(state.gain, state.gain.grad, lr, keep)
                sgd_masked_step(state.beta, state.beta.grad, lr, keep)
    return float(loss.data)


def _layer_flags(net: PackedNetwork, trainable_layers: Optional[Iterable[str]]) -> List[bool]:
    if trainable_layers is None:
        return [True] * len(net.prunable_positions)
    names = set(trainable_layers)
    unknown = names - {net.backbone[p].name for p in net.prunable_positions}
    if unknown:
        raise InputError(f"unknown trainable layers {sorted(unknown)}")
    return [net.backbone[p].name in names for p in net.prunable_positions]


def train_task(net: PackedNetwork, t: int, inputs, labels, schedule: TrainSchedule,
               trainable_layers: Optional[Iterable[str]] = None) -> List[float]:
    """
    Masked SGD for the open task. Returns the mean loss of every epoch.

    ``trainable_layers`` names the prunable layers whose FREE weights may
    change; ``None`` means all of them. The task head always trains.
    """
    record = net.task(t)
    if record.state != "training":
        raise StateError(f"task {t} is {record.state}, expected training")
    _check_dataset(inputs, labels, record.class_count)
    flags = _layer_flags(net, trainable_layers)

    forward_masks = pp.training_active_mask(net.ownership, t)
    weight_masks = [m & ~lock & flag for m, lock, flag in
                    zip(pp.update_mask(net.ownership, t, "training"), net.locked, flags)]
    history = []
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        losses = [_sgd_step(net, t, inputs[idx], labels[idx], lr, forward_masks, weight_masks, flags)
                  for idx in _batches(net, t, epoch, len(inputs), schedule.batch_size, salt=0)]
        history.append(float(np.mean(losses)))
        logger.debug("Task %d epoch %d: lr=%g loss=%.6f", t, epoch, lr, history[-1])
    logger.info("Trained task %d ('%s') for %d epochs", t, record.name, schedule.epochs)
    return history


def prune_task(net: PackedNetwork, t: int, ratio: float) -> List[PruneDecision]:
    """Magnitude-prune the FREE weights of every prunable layer and commit the survivors to t."""
    record = net.task(t)
    if record.state != "training":
        raise StateError(f"task {t} is {record.state}, expected training")
    if not 0.0 <= ratio <= 1.0:
        raise InputError(f"pruning ratio must lie in [0, 1], got {ratio}")

    decisions, survivors = [], []
    for index, owners in enumerate(net.ownership.layers):
        weight = net.prunable_layer(index).weight
        eligible = (owners == pp.FREE) & ~net.locked[index]
        decision = magnitude_select(weight, eligible, ratio)
        if decision.eligible == 0:
            logger.warning("Layer %s has no eligible weights for task %d",
                           net.backbone[net.prunable_positions[index]].name, t)
        apply_prune(weight, decision)
        keep = eligible.reshape(-1).copy()
        keep[decision.indices] = False
        survivors.append(keep)
        decisions.append(decision)
    pp.commit_survivors(net.ownership, t, survivors)
    record.advance("training", "pruned_retraining")
    record.ratio = ratio
    logger.info("Pruned task %d at ratio %.2f: %d pruned, %d kept", t, ratio,
                sum(d.pruned for d in decisions), sum(d.retained for d in decisions))
    return decisions


def prune_task_filters(net: PackedNetwork, t: int, inputs, labels, n_filters: int, steps: int = 1,
                       batch_size: int = 64) -> List[Tuple[int, int]]:
    """
    Filter-level variant of ``prune_task``: ``steps`` rounds of Taylor-ranked
    filter removal, each scored on one batch, then commit of every FREE weight
    outside the removed filters.
    """
    record = net.task(t)
    if record.state != "training":
        raise StateError(f"task {t} is {record.state}, expected training")
    _check_dataset(inputs, labels, record.class_count)

    removed = []
    for step in range(steps):
        idx = next(_batches(net, t, step, len(inputs), batch_size, salt=2))
        record_filter_trace(net, t, inputs[idx], labels[idx])
        removed.extend(filter_prune_step(net, n_filters))

    survivors = []
    for index, owners in enumerate(net.ownership.layers):
        keep = owners == pp.FREE
        keep[net.pruned_filters[index]] = False
        survivors.append(keep)
    pp.commit_survivors(net.ownership, t, survivors)
    record.advance("training", "pruned_retraining")
    total_filters = sum(p.size for p in net.pruned_filters)
    record.ratio = len(removed) / total_filters if total_filters else 0.0
    logger.info("Filter-pruned task %d: %d filters removed", t, len(removed))
    return removed


def retrain_task(net: PackedNetwork, t: int, inputs, labels, schedule: TrainSchedule) -> List[float]:
    """Fine-tune task t's own survivors at the constant retrain rate, then freeze the task."""
    record = net.task(t)
    if record.state != "pruned_retraining":
        raise StateError(f"task {t} is {record.state}, expected pruned_retraining")
    _check_dataset(inputs, labels, record.class_count)

    forward_masks = pp.inference_mask(net.ownership, t)
    weight_masks = [m & ~lock for m, lock in zip(pp.update_mask(net.ownership, t, "retraining"), net.locked)]
    flags = [True] * len(weight_masks)
    history = []
    for epoch in range(schedule.retrain_epochs):
        losses = [_sgd_step(net, t, inputs[idx], labels[idx], schedule.retrain_lr, forward_masks,
                            weight_masks, flags)
                  for idx in _batches(net, t, epoch, len(inputs), schedule.batch_size, salt=1)]
        history.append(float(np.mean(losses)))
        logger.debug("Task %d retrain epoch %d: loss=%.6f", t, epoch, history[-1])

    record.advance("pruned_retraining", "frozen")
    if t == 1:
        net.biases_frozen = True
        net.batchnorm_frozen = True
    net.filter_trace = None
    logger.info("Retrained and froze task %d ('%s')", t, record.name)
    return history


def infer(net: PackedNetwork, t: int, inputs, masked: bool = True) -> np.ndarray:
    """
    Logits of task t with batch-norm in eval mode.

    ``masked=False`` runs the full unmasked network through task t's head.
    """
    net.task(t)
    logits = net.forward(inputs, t, masks="task" if masked else None, bn_mode="eval")
    return logits.data.copy()


def snapshot(net: PackedNetwork, t: int, probe_inputs) -> np.ndarray:
    return infer(net, t, probe_inputs)


def task_loss(net: PackedNetwork, t: int, inputs, labels) -> float:
    """Mean cross-entropy of task t on a labelled set, batch-norm in eval mode."""
    _check_dataset(inputs, labels, net.task(t).class_count)
    logits = net.forward(inputs, t, bn_mode="eval")
    return float(softmax_xent(logits, labels).data)


def error_rate(net: PackedNetwork, t: int, inputs, labels) -> float:
    """Top-1 error in percent."""
    _check_dataset(inputs, labels)
    predictions = infer(net, t, inputs).argmax(axis=1)
    return float(100.0 * np.mean(predictions != np.asarray(labels)))


def bias_overhead_bytes(net: PackedNetwork) -> int:
    """Extra storage of separate-bias mode: one bias vector per task per layer."""
    if not net.separate_bias:
        return 0
    per_task = sum(b.size for b in (net.prunable_layer(i).bias for i in range(len(net.prunable_positions)))
                   if b is not None)
    return 4 * per_task * len(net.tasks)


def mask_states(net: PackedNetwork) -> int:
    return pp.encode(net.ownership).state_count


def model_size_bytes(net: PackedNetwork) -> int:
    """4-byte backbone and heads, plus the compact mask and any separate biases."""
    heads = sum(r.head_weight.size + r.head_bias.size for r in net.tasks)
    buffers = sum(s.running_mean.size + s.running_var.size for s in net.layers if s.running_mean is not None)
    mask = pp.overhead_bytes(net.prunable_count, mask_states(net))
    return 4 * (net.parameter_count() + heads + buffers) + mask + bias_overhead_bytes(net)
