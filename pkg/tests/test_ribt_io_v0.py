import struct

import numpy as np
import pytest

from rib_lab.lab_core.tensor.errors_v0 import TensorFormatError, TensorLengthError
from rib_lab.lab_core.tensor.ribt_io_v0 import decode_tensor, encode_tensor, load_tensor, save_tensor


# =============================================================================
# ТЕСТ 1. Раскладка байтов
# =============================================================================

def test_encode_header_layout():
    t = np.arange(6, dtype=np.float32).reshape(2, 3)

    blob = encode_tensor(t)

    assert blob[:4] == b"RIBT"
    assert blob[4] == 1          # version
    assert blob[5] == 0          # f32
    assert struct.unpack_from("<I", blob, 6)[0] == 2
    assert struct.unpack_from("<2Q", blob, 10) == (2, 3)
    assert len(blob) == 10 + 16 + 6 * 4


def test_save_load_is_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    t = rng.standard_normal((3, 4, 5))
    t[0, 0, 0] = -0.0

    path = save_tensor(tmp_path / "w.ribt", t)
    back = load_tensor(path)

    assert back.dtype == np.float64
    assert back.tobytes() == t.tobytes()
    assert not back.flags.writeable


# =============================================================================
# ТЕСТ 2. Ошибки формата
# =============================================================================

def test_bad_magic_and_dtype_code():
    blob = bytearray(encode_tensor(np.zeros(2, dtype=np.float32)))

    bad_magic = b"XXXX" + bytes(blob[4:])
    with pytest.raises(TensorFormatError):
        decode_tensor(bad_magic)

    blob[5] = 7
    with pytest.raises(TensorFormatError):
        decode_tensor(bytes(blob))


def test_truncated_and_oversized_payload():
    blob = encode_tensor(np.zeros((2, 2), dtype=np.float64))

    with pytest.raises(TensorLengthError):
        decode_tensor(blob[:-1])
    with pytest.raises(TensorLengthError):
        decode_tensor(blob + b"\x00")
    with pytest.raises(TensorLengthError):
        decode_tensor(blob[:5])


def test_rank_zero_is_rejected():
    with pytest.raises(TensorFormatError):
        encode_tensor(np.float32(1.0))
