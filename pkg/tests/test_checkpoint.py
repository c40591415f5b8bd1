import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mmdt.checkpoint import MAGIC, dumps, load_module, loads, module_tensors
from mmdt.errors import CorruptArchiveError


def test_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": rng.standard_normal(5),
               "scalar": np.float64(2.5), "empty": np.zeros((0, 3), dtype=np.float32)}
    back, meta = loads(dumps(tensors, {"kind": "test", "iteration": 7}))
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == np.asarray(v).dtype and back[k].tobytes() == np.asarray(v).tobytes()
    assert meta == {"kind": "test", "iteration": "7"}


def test_empty_archive():
    data = dumps({})
    assert data == MAGIC + struct.pack("<III", 1, 0, 0)
    assert loads(data) == ({}, {})


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_round_trip_property(arr):
    back, _ = loads(dumps({"x": arr}))
    assert back["x"].shape == arr.shape and back["x"].tobytes() == arr.tobytes()


def test_truncation_reports_offset():
    data = dumps({"w": np.ones((2, 2))}, {"k": "v"})
    for cut in (4, 12, 20, len(data) - 1):
        with pytest.raises(CorruptArchiveError) as err:
            loads(data[:cut])
        assert 0 <= err.value.offset <= cut


def test_bad_magic_and_version():
    data = dumps({"w": np.ones(2)})
    with pytest.raises(CorruptArchiveError) as err:
        loads(b"NOTACKPT" + data[8:])
    assert err.value.offset == 0
    with pytest.raises(CorruptArchiveError) as err:
        loads(MAGIC + struct.pack("<I", 9) + data[12:])
    assert err.value.offset == 8
    with pytest.raises(CorruptArchiveError):
        loads(data + b"x")


def test_module_round_trip():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3), torch.nn.BatchNorm2d(4))
    net(torch.rand(2, 3, 8, 8))
    tensors, _ = loads(dumps(module_tensors(net, "m.")))
    other = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3), torch.nn.BatchNorm2d(4))
    load_module(other, tensors, "m.")
    for (k, a), b in zip(net.state_dict().items(), other.state_dict().values()):
        assert torch.equal(a, b), k
    with pytest.raises(KeyError):
        load_module(other, tensors, "missing.")
