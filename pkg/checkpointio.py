"""
Single-file checkpoints of a PackedNetwork.

Layout, little-endian throughout::

    header      magic "PKNT", version u16, layer count u16, task count u16, flags u8
    network     seed i64, input rank u8, input dims u32...
    layers      per layer: kind u8, name, dims 5 x u32, has_bias u8, then
                prunable: weight f32..., bias f32..., locked entries (u32 count + u32 indices),
                pruned-filter bits
                batchnorm: gain, beta, running mean, running var (f32...)
    ownership   entries u64, tasks u16, states u16, bits u8, state table u8...,
                byte length u64, packed entries
    tasks       per task: name, state u8, ratio f64 (NaN = none), classes u32,
                head weight f32..., head bias f32..., locked head columns bits,
                separate biases f32... when that mode is on
    trailer     CRC32 u32 of every preceding byte

Strings are a u16 length followed by UTF-8 bytes.
"""

import logging
import math
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

import packedparams as pp
from errors import FormatError, ReportIOError
from lifecycle import TASK_STATES, PackedNetwork, TaskRecord
from tensorcore import LAYER_KINDS, LayerSpec, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"PKNT"
VERSION = 1
SUPPORTED_VERSIONS = (1,)

FLAG_BIASES_FROZEN = 0x01
FLAG_BATCHNORM_FROZEN = 0x02
FLAG_SEPARATE_BIAS = 0x04
FLAG_EXPORTED = 0x08

_HEADER = struct.Struct("<4sHHHB")


class _Writer:
    def __init__(self):
        self.parts = []

    def pack(self, fmt, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def text(self, value):
        raw = value.encode("utf-8")
        self.pack("H", len(raw))
        self.parts.append(raw)

    def floats(self, array):
        self.parts.append(np.asarray(array).astype("<f4").tobytes())

    def bits(self, array):
        self.parts.append(np.packbits(np.asarray(array, dtype=bool).reshape(-1), bitorder="little").tobytes())

    def indices(self, array):
        flat = np.flatnonzero(np.asarray(array, dtype=bool).reshape(-1)).astype("<u4")
        self.pack("I", flat.size)
        self.parts.append(flat.tobytes())

    def getvalue(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data, end):
        self.data = data
        self.end = end
        self.offset = 0

    def take(self, count):
        if self.offset + count > self.end:
            raise FormatError(f"truncated checkpoint: need {count} bytes, {self.end - self.offset} left",
                              self.offset)
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt):
        layout = struct.Struct("<" + fmt)
        values = layout.unpack(self.take(layout.size))
        return values if len(values) > 1 else values[0]

    def text(self):
        start = self.offset
        raw = self.take(self.unpack("H"))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid UTF-8 string: {str(e)}", start) from e

    def floats(self, shape):
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)

    def indices(self, shape):
        start = self.offset
        count = self.unpack("I")
        flat = np.frombuffer(self.take(4 * count), dtype="<u4").astype(np.int64)
        size = int(np.prod(shape))
        if count and flat.max() >= size:
            raise FormatError(f"index {int(flat.max())} outside a layer of {size} entries", start)
        mask = np.zeros(size, dtype=bool)
        mask[flat] = True
        return mask.reshape(shape)

    def bits(self, shape):
        count = int(np.prod(shape))
        raw = np.frombuffer(self.take((count + 7) // 8), dtype=np.uint8)
        return np.unpackbits(raw, count=count, bitorder="little").astype(bool).reshape(shape)


def _flags(net, exported=False):
    flags = 0
    if net.biases_frozen:
        flags |= FLAG_BIASES_FROZEN
    if net.batchnorm_frozen:
        flags |= FLAG_BATCHNORM_FROZEN
    if net.separate_bias:
        flags |= FLAG_SEPARATE_BIAS
    if exported:
        flags |= FLAG_EXPORTED
    return flags


def serialize(net: PackedNetwork, exported: bool = False) -> bytes:
    out = _Writer()
    out.parts.append(_HEADER.pack(MAGIC, VERSION, len(net.layers), len(net.tasks), _flags(net, exported)))
    out.pack("q", net.seed)
    out.pack("B", len(net.input_shape))
    out.pack(f"{len(net.input_shape)}I", *net.input_shape)

    prunable = 0
    for state in net.layers:
        spec = state.spec
        out.pack("B", LAYER_KINDS.index(spec.kind))
        out.text(spec.name)
        out.pack("5I", spec.in_features, spec.out_features, spec.kernel_size, spec.stride, spec.padding)
        out.pack("B", int(spec.has_bias))
        if spec.prunable:
            out.floats(state.weight.data)
            if state.bias is not None:
                out.floats(state.bias.data)
            out.indices(net.locked[prunable])
            out.bits(net.pruned_filters[prunable])
            prunable += 1
        elif spec.kind == "batchnorm":
            for array in (state.gain.data, state.beta.data, state.running_mean, state.running_var):
                out.floats(array)

    encoded = pp.encode(net.ownership)
    out.pack("QHHB", encoded.entry_count, encoded.task_count, encoded.state_count, encoded.bits_per_entry)
    out.pack(f"{encoded.state_count}B", *encoded.states)
    out.pack("Q", encoded.byte_length)
    out.parts.append(encoded.data)

    for record in net.tasks:
        out.text(record.name)
        out.pack("B", TASK_STATES.index(record.state))
        out.pack("d", math.nan if record.ratio is None else record.ratio)
        out.pack("I", record.class_count)
        out.floats(record.head_weight.data)
        out.floats(record.head_bias.data)
        out.bits(record.head_locked)
        if net.separate_bias:
            for bias in record.biases:
                if bias is not None:
                    out.floats(bias.data)

    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def deserialize(data: bytes) -> PackedNetwork:
    if len(data) < _HEADER.size + 4:
        raise FormatError(f"truncated checkpoint of {len(data)} bytes", len(data))
    magic, version, layer_count, task_count, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version not in SUPPORTED_VERSIONS:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    body_end = len(data) - 4
    (stored_crc,) = struct.unpack_from("<I", data, body_end)
    if zlib.crc32(data[:body_end]) & 0xFFFFFFFF != stored_crc:
        raise FormatError("checksum mismatch (truncated or corrupt checkpoint)", body_end)

    reader = _Reader(data, body_end)
    reader.offset = _HEADER.size
    seed = reader.unpack("q")
    rank = reader.unpack("B")
    input_shape = tuple(int(v) for v in np.atleast_1d(reader.unpack(f"{rank}I")))

    specs, payloads = [], []
    for _ in range(layer_count):
        start = reader.offset
        kind_code = reader.unpack("B")
        if kind_code >= len(LAYER_KINDS):
            raise FormatError(f"unknown layer kind code {kind_code}", start)
        name = reader.text()
        dims = reader.unpack("5I")
        has_bias = bool(reader.unpack("B"))
        spec = LayerSpec(LAYER_KINDS[kind_code], name, *dims, has_bias=has_bias)
        payload = {}
        if spec.prunable:
            payload["weight"] = reader.floats(spec.weight_shape)
            if has_bias:
                payload["bias"] = reader.floats((spec.out_features,))
            payload["locked"] = reader.indices(spec.weight_shape)
            payload["pruned"] = reader.bits((spec.out_features,))
        elif spec.kind == "batchnorm":
            for key in ("gain", "beta", "running_mean", "running_var"):
                payload[key] = reader.floats((spec.in_features,))
        specs.append(spec)
        payloads.append(payload)

    net = PackedNetwork(specs, input_shape, seed=seed, separate_bias=bool(flags & FLAG_SEPARATE_BIAS),
                        initialize=False)
    net.biases_frozen = bool(flags & FLAG_BIASES_FROZEN)
    net.batchnorm_frozen = bool(flags & FLAG_BATCHNORM_FROZEN)
    prunable = 0
    for state, payload in zip(net.layers, payloads):
        if state.spec.prunable:
            state.weight = Tensor(payload["weight"])
            if "bias" in payload:
                state.bias = Tensor(payload["bias"])
            net.locked[prunable] = payload["locked"]
            net.pruned_filters[prunable] = payload["pruned"]
            prunable += 1
        elif state.spec.kind == "batchnorm":
            state.gain = Tensor(payload["gain"])
            state.beta = Tensor(payload["beta"])
            state.running_mean = payload["running_mean"].copy()
            state.running_var = payload["running_var"].copy()

    start = reader.offset
    entry_count, map_tasks, state_count, bits = reader.unpack("QHHB")
    states = tuple(int(v) for v in np.atleast_1d(reader.unpack(f"{state_count}B"))) if state_count else ()
    byte_length = reader.unpack("Q")
    encoded = pp.EncodedMask(bits_per_entry=bits, state_count=state_count, data=reader.take(byte_length),
                             entry_count=entry_count, states=states,
                             layer_shapes=tuple(net.ownership.shapes), task_count=map_tasks)
    try:
        net.ownership = pp.decode(encoded)
    except FormatError as e:
        raise FormatError(f"ownership stream: {str(e)}", start) from e
    if map_tasks != task_count:
        raise FormatError(f"ownership map has {map_tasks} tasks, header says {task_count}", start)

    for t in range(1, task_count + 1):
        start = reader.offset
        name = reader.text()
        state_code = reader.unpack("B")
        if state_code >= len(TASK_STATES):
            raise FormatError(f"unknown task state code {state_code}", start)
        ratio = reader.unpack("d")
        classes = reader.unpack("I")
        head_weight = Tensor(reader.floats((classes, net.feature_count)))
        head_bias = Tensor(reader.floats((classes,)))
        head_locked = reader.bits((net.feature_count,))
        biases = None
        if net.separate_bias:
            biases = [Tensor(reader.floats((net.prunable_layer(i).spec.out_features,)))
                      if net.prunable_layer(i).bias is not None else None
                      for i in range(len(net.prunable_positions))]
        net.tasks.append(TaskRecord(t, name, classes, head_weight, head_bias, head_locked,
                                    state=TASK_STATES[state_code],
                                    ratio=None if math.isnan(ratio) else ratio, biases=biases))
    if reader.offset != body_end:
        raise FormatError(f"{body_end - reader.offset} unexpected trailing bytes", reader.offset)
    return net


def _write_atomic(path, payload: bytes):
    path = Path(path)
    tmp = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise ReportIOError(f"Error writing checkpoint {path}: {str(e)}") from e


def save(net: PackedNetwork, path):
    payload = serialize(net)
    _write_atomic(path, payload)
    logger.info("Saved checkpoint %s (%d bytes, %d tasks)", path, len(payload), len(net.tasks))
    return len(payload)


def load(path) -> PackedNetwork:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ReportIOError(f"Error reading checkpoint {path}: {str(e)}") from e
    net = deserialize(data)
    logger.info("Loaded checkpoint %s (%d tasks)", path, len(net.tasks))
    return net


def dense_task_view(net: PackedNetwork, t: int) -> PackedNetwork:
    """
    Single-task network with task t's masked-out weights materialized as zeros.

    Every weight of the view is owned by its only task, so a plain forward
    equals ``infer(net, t, .)``.
    """
    record = net.task(t)
    masks = net.task_masks(t)
    dense = PackedNetwork(net.backbone, net.input_shape, seed=net.seed, initialize=False)
    for index, mask in enumerate(masks):
        source = net.prunable_layer(index)
        target = dense.prunable_layer(index)
        target.weight = Tensor(np.where(mask, source.weight.data, np.float32(0)))
        bias = net.bias_for(t, index)
        target.bias = None if bias is None else bias.copy()
    for source, target in zip(net.layers, dense.layers):
        if source.spec.kind == "batchnorm":
            target.gain = source.gain.copy()
            target.beta = source.beta.copy()
            target.running_mean = source.running_mean.copy()
            target.running_var = source.running_var.copy()
    dense.ownership = pp.OwnershipMap([np.ones(shape, dtype=np.uint8) for shape in dense.ownership.shapes],
                                      task_count=1)
    dense.tasks.append(TaskRecord(1, record.name, record.class_count, record.head_weight.copy(),
                                  record.head_bias.copy(), record.head_locked.copy(),
                                  state="frozen", ratio=record.ratio))
    dense.biases_frozen = True
    dense.batchnorm_frozen = True
    return dense


def export_task(net: PackedNetwork, t: int, path):
    payload = serialize(dense_task_view(net, t), exported=True)
    _write_atomic(path, payload)
    logger.info("Exported task %d to %s (%d bytes)", t, path, len(payload))
    return len(payload)
