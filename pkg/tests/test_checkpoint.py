import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advdisjoint.attacks import preset
from advdisjoint.checkpoint import MAGIC, CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from advdisjoint.data import make_templates
from advdisjoint.evaluation import transfer_matrix
from advdisjoint.models import ModelConfig, new_set

CONV = ModelConfig("small_conv", (1, 4, 4), 3, (2, 2, 4))
MLP = ModelConfig("mlp", (2,), 2, (4, 3))


def test_round_trip_is_bit_identical(tmp_path):
    s = new_set(CONV, 3, seeds=[4, 5, 6], provenance="disjoint")
    path = tmp_path / "set.advset"
    save_checkpoint(s, path, {"n": 3}, {"train_seed": 0})
    back = load_checkpoint(path)
    assert back.n == 3 and back.provenance == "disjoint" and back.config == CONV
    for a, b in zip(s.members, back.members):
        for k in a:
            assert a[k].data.tobytes() == b[k].data.tobytes()
    assert back.meta["seeds"] == {"train_seed": 0}
    assert back.meta["train_config_hash"]
    assert dumps(back, {"n": 3}, {"train_seed": 0}) == path.read_bytes()


def test_round_trip_then_transfer_matrix_is_identical(tmp_path):
    s = new_set(CONV, 2, seeds=[1, 2])
    data = make_templates(classes=3, n=30, shape=(1, 4, 4), seed=0)
    save_checkpoint(s, tmp_path / "c")
    spec = preset("pgd1", rng_seed=3)
    a = transfer_matrix(s, spec, data)
    b = transfer_matrix(load_checkpoint(tmp_path / "c"), spec, data)
    np.testing.assert_array_equal(a.accuracy, b.accuracy)


def test_layout_starts_with_magic_and_version():
    raw = dumps(new_set(MLP, 1))
    assert raw[:6] == MAGIC
    assert struct.unpack("<H", raw[6:8])[0] == 1


def test_version_mismatch_is_explicit():
    raw = bytearray(dumps(new_set(MLP, 1)))
    raw[6] = 2
    with pytest.raises(CheckpointError, match="version mismatch") as err:
        loads(bytes(raw))
    assert err.value.field == "version"


def test_corrupt_magic():
    raw = b"XXXXXX" + dumps(new_set(MLP, 1))[6:]
    with pytest.raises(CheckpointError) as err:
        loads(raw)
    assert err.value.field == "magic"


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.999))
def test_any_truncation_fails_with_a_named_field(frac):
    raw = dumps(new_set(MLP, 2))
    cut = raw[:int(len(raw) * frac)]
    with pytest.raises(CheckpointError) as err:
        loads(cut)
    assert err.value.field


def test_flipped_value_byte_fails_digest():
    raw = bytearray(dumps(new_set(MLP, 1)))
    raw[-40] ^= 0xFF
    with pytest.raises(CheckpointError) as err:
        loads(bytes(raw))
    assert err.value.field == "digest"


def test_truncated_file_leaves_no_partial_set(tmp_path):
    s = new_set(MLP, 2)
    path = tmp_path / "c"
    save_checkpoint(s, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    assert not (tmp_path / "c.tmp").exists()
