import struct

import numpy as np
import pytest

from lagcausal.container import KIND_INSTANCE, KIND_SCORES, MAGIC, ContainerError, pack, unpack


def _blob():
    return pack(KIND_INSTANCE, {"id": "x", "n": 3}, np.arange(6, dtype=np.float32))


def test_roundtrip_and_layout():
    data = _blob()
    assert data[:8] == MAGIC
    assert struct.unpack_from("<HHI", data, 8) == (1, KIND_INSTANCE, 0)
    meta, payload = unpack(data, KIND_INSTANCE)
    assert meta == {"id": "x", "n": 3}
    assert payload.dtype == np.float32 and np.array_equal(payload, np.arange(6))


def test_pack_is_deterministic():
    assert _blob() == _blob()


@pytest.mark.parametrize("cut, section", [(4, "header"), (18, "metadata"), (30, "metadata")])
def test_truncation_names_section(cut, section):
    with pytest.raises(ContainerError) as err:
        unpack(_blob()[:cut])
    assert err.value.section == section


def test_truncated_payload_and_hash():
    data = _blob()
    with pytest.raises(ContainerError) as err:
        unpack(data[:-8 - 5])
    assert err.value.section == "payload"
    with pytest.raises(ContainerError) as err:
        unpack(data[:-3])
    assert err.value.section == "hash"


def test_corruption_detected():
    data = bytearray(_blob())
    data[-12] ^= 0xFF  # inside the payload
    with pytest.raises(ContainerError) as err:
        unpack(bytes(data))
    assert err.value.section == "hash"


def test_bad_magic_version_and_kind():
    data = _blob()
    with pytest.raises(ContainerError, match="magic"):
        unpack(b"XXXXXXXX" + data[8:])
    with pytest.raises(ContainerError, match="version"):
        unpack(data[:8] + struct.pack("<H", 9) + data[10:])
    with pytest.raises(ContainerError, match="kind"):
        unpack(data, KIND_SCORES)


def test_trailing_bytes_rejected():
    with pytest.raises(ContainerError):
        unpack(_blob() + b"\x00")
