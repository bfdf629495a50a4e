import numpy as np
import pytest

from tdsnet.autodiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


@pytest.fixture
def ckpt(tmp_path):
    p = tmp_path / "m.tdsc"
    save_checkpoint(p, {"a": np.arange(6.0).reshape(2, 3), "b": np.float64(2.5)})
    return p


def test_scalar_and_matrix_survive(ckpt):
    back = load_checkpoint(ckpt)
    assert back["a"].shape == (2, 3) and back["b"].shape == () and float(back["b"]) == 2.5


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing"])
def test_damaged_checkpoint_rejected(ckpt, damage):
    raw = bytearray(ckpt.read_bytes())
    if damage == "magic":
        raw[0] ^= 0xFF
    elif damage == "version":
        raw[4] = 9
    elif damage == "truncate":
        raw = raw[:-1]
    else:
        raw += b"x"
    ckpt.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(ckpt)
