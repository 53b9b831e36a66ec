import struct

import numpy as np
import pytest

from tidm.data.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from tidm.errors import (
    CheckpointFormatError,
    ChecksumMismatchError,
    InputError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from tidm.numerics import ParamStore


@pytest.fixture
def store():
    params = ParamStore(
        {
            "unet/main/conv_in/w": np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2) / 7,
            "text/token_embedding": np.full((3, 2), -0.5, dtype=np.float32),
            "codec/latent_scale": np.array([1.25], dtype=np.float32),
        }
    )
    params.step_count = 42
    return params


def test_save_and_read_back(store, tmp_path):
    path = str(tmp_path / "model.ckpt")
    checksum = save_checkpoint(path, store, {"denoiser": {"base_channels": 8}, "vocab": "vocab.txt"})
    assert checksum == store.checksum()

    loaded, meta = read_checkpoint(path)
    assert loaded.equals(store)
    assert loaded.step_count == 42
    assert meta["denoiser"] == {"base_channels": 8}
    assert meta["vocab"] == "vocab.txt"
    assert meta["step_count"] == 42
    assert load_checkpoint(path).checksum() == checksum
    assert not (tmp_path / "model.ckpt.tmp").exists()


def test_encoding_is_byte_stable(store):
    blob = encode_checkpoint(store, {"b": 1, "a": [1, 2]})
    assert blob == encode_checkpoint(store.copy(), {"a": [1, 2], "b": 1})
    assert blob[:4] == MAGIC
    manifest = blob[16 : 16 + struct.unpack_from("<Q", blob, 8)[0]].decode()
    names = [line.split()[1] for line in manifest.splitlines() if line.startswith("array")]
    assert names == sorted(names)


def test_empty_store_is_a_valid_container():
    params, meta = decode_checkpoint(encode_checkpoint(ParamStore()))
    assert len(params) == 0
    assert meta == {"step_count": 0}


def test_flipped_payload_byte_is_detected(store):
    blob = bytearray(encode_checkpoint(store))
    blob[-9] ^= 0x01
    with pytest.raises(ChecksumMismatchError):
        decode_checkpoint(bytes(blob))


def test_truncation_is_detected(store):
    blob = encode_checkpoint(store)
    with pytest.raises(TruncatedCheckpointError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(TruncatedCheckpointError):
        decode_checkpoint(blob[:10])


def test_bad_magic_version_and_trailing_bytes(store):
    blob = encode_checkpoint(store)
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(blob + b"\x00")


def test_error_codes_are_distinct():
    kinds = (CheckpointFormatError, ChecksumMismatchError, TruncatedCheckpointError, UnsupportedVersionError)
    codes = {kind.code for kind in kinds}
    assert len(codes) == 4
    assert ChecksumMismatchError.exit_code == 3


def test_missing_file_and_bad_meta_key(store, tmp_path):
    with pytest.raises(InputError):
        read_checkpoint(str(tmp_path / "absent.ckpt"))
    with pytest.raises(InputError):
        encode_checkpoint(store, {"bad key": 1})
