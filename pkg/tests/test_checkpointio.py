import struct

import numpy as np
import pytest

import checkpointio
import packedparams as pp
from conftest import TINY_SHAPE, pack, tiny_backbone
from errors import FormatError, ReportIOError, TaskLookupError
from lifecycle import PackedNetwork, add_task, infer


def _same_network(a, b):
    assert a.ownership == b.ownership
    assert (a.biases_frozen, a.batchnorm_frozen, a.separate_bias) == (b.biases_frozen, b.batchnorm_frozen,
                                                                     b.separate_bias)
    for left, right in zip(a.layers, b.layers):
        assert left.spec == right.spec
        for x, y in ((left.weight, right.weight), (left.bias, right.bias), (left.gain, right.gain),
                     (left.beta, right.beta)):
            assert (x is None) == (y is None)
            if x is not None:
                assert x.data.tobytes() == y.data.tobytes()
        if left.running_mean is not None:
            assert left.running_mean.tobytes() == right.running_mean.tobytes()
            assert left.running_var.tobytes() == right.running_var.tobytes()
    for x, y in zip(a.locked, b.locked):
        assert np.array_equal(x, y)
    for ra, rb in zip(a.tasks, b.tasks):
        assert (ra.name, ra.state, ra.ratio, ra.class_count) == (rb.name, rb.state, rb.ratio, rb.class_count)
        assert ra.head_weight.data.tobytes() == rb.head_weight.data.tobytes()
        assert ra.head_bias.data.tobytes() == rb.head_bias.data.tobytes()


def test_roundtrip_is_bitwise(packed_net, tmp_path, probes):
    net, _ = packed_net
    path = tmp_path / "net.tnet"
    checkpointio.save(net, path)
    loaded = checkpointio.load(path)
    _same_network(net, loaded)
    for t in range(1, len(net.tasks) + 1):
        assert infer(loaded, t, probes).tobytes() == infer(net, t, probes).tobytes()
    assert checkpointio.serialize(loaded) == path.read_bytes()


def test_roundtrip_separate_bias_and_open_task(datasets, schedule, tmp_path):
    net = PackedNetwork(tiny_backbone(), TINY_SHAPE, seed=9, separate_bias=True)
    pack(net, datasets[0], schedule, 0.5)
    pack(net, datasets[1], schedule, 0.75)
    add_task(net, "open", 4)
    loaded = checkpointio.deserialize(checkpointio.serialize(net))
    _same_network(net, loaded)
    for ra, rb in zip(net.tasks, loaded.tasks):
        for x, y in zip(ra.biases, rb.biases):
            assert x.data.tobytes() == y.data.tobytes()
    assert loaded.open_task_id() == 3


def test_file_size_is_weights_plus_mask(packed_net):
    net, _ = packed_net
    payload = checkpointio.serialize(net)
    weights = 4 * net.prunable_count
    encoded = pp.encode(net.ownership)
    assert encoded.state_count == 4
    assert encoded.byte_length * 16 == pytest.approx(weights, rel=1e-3)
    others = 4 * (net.parameter_count() - net.prunable_count
                  + sum(s.running_mean.size * 2 for s in net.layers if s.running_mean is not None)
                  + sum(r.head_weight.size + r.head_bias.size for r in net.tasks))
    metadata = len(payload) - weights - encoded.byte_length - others
    assert 0 < metadata < 512


def test_bad_magic(packed_net):
    payload = bytearray(checkpointio.serialize(packed_net[0]))
    payload[:4] = b"NOPE"
    with pytest.raises(FormatError) as info:
        checkpointio.deserialize(bytes(payload))
    assert info.value.offset == 0


def test_unsupported_version(packed_net):
    payload = bytearray(checkpointio.serialize(packed_net[0]))
    payload[4:6] = struct.pack("<H", 9)
    with pytest.raises(FormatError) as info:
        checkpointio.deserialize(bytes(payload))
    assert info.value.offset == 4


@pytest.mark.parametrize("keep", [3, 20, 400, -1])
def test_truncated_file(packed_net, tmp_path, keep):
    payload = checkpointio.serialize(packed_net[0])
    path = tmp_path / "short.tnet"
    path.write_bytes(payload[:keep])
    with pytest.raises(FormatError) as info:
        checkpointio.load(path)
    assert "offset" in str(info.value)


def test_corrupt_byte_fails_checksum(packed_net):
    payload = bytearray(checkpointio.serialize(packed_net[0]))
    payload[len(payload) // 2] ^= 0xFF
    with pytest.raises(FormatError):
        checkpointio.deserialize(bytes(payload))


def test_export_matches_masked_inference(packed_net, tmp_path):
    net, _ = packed_net
    probes = np.random.default_rng(11).standard_normal((100,) + TINY_SHAPE).astype(np.float32)
    for t in range(1, len(net.tasks) + 1):
        path = tmp_path / f"task{t}.tnet"
        checkpointio.export_task(net, t, path)
        dense = checkpointio.load(path)
        assert len(dense.tasks) == 1
        plain = dense.forward(probes, 1, masks=None).data
        assert plain.tobytes() == infer(net, t, probes).tobytes()


def test_export_unknown_task(packed_net, tmp_path):
    with pytest.raises(TaskLookupError):
        checkpointio.export_task(packed_net[0], 9, tmp_path / "none.tnet")


def test_failed_save_leaves_no_temp_file(packed_net, tmp_path):
    target = tmp_path / "taken"
    target.mkdir()
    with pytest.raises(ReportIOError):
        checkpointio.save(packed_net[0], target)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["taken"]
