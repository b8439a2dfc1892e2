import struct

import numpy as np
import pytest

from m2s.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from m2s.config import ModelConfig
from m2s.model import M2SDetector

SMALL = dict(backbone_channels=[4, 4, 8, 8, 8], cam_channels=[4, 8, 8], head_width=4)


def _model(seed=0, **kw):
    return M2SDetector(ModelConfig(**{**SMALL, **kw}), seed=seed)


def test_roundtrip_bit_exact(tmp_path):
    src, dst = _model(0), _model(1)
    save_checkpoint(tmp_path / "m.ckpt", src, "h")
    load_checkpoint(tmp_path / "m.ckpt", dst, "h")
    for (na, a), (nb, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert na == nb and a.data.tobytes() == b.data.tobytes()


def test_layout(tmp_path):
    m = _model()
    save_checkpoint(tmp_path / "m.ckpt", m, "abc", {"epoch": 3})
    blob = (tmp_path / "m.ckpt").read_bytes()
    assert blob[:4] == MAGIC
    (n,) = struct.unpack("<I", blob[4:8])
    manifest, arrays = read_checkpoint(tmp_path / "m.ckpt")
    assert len(blob) - 8 - n == 4 * m.num_parameters()
    assert manifest["dtype"] == "float32" and manifest["extra"] == {"epoch": 3}
    assert [p["name"] for p in manifest["params"]] == [k for k, _ in m.named_parameters()]
    assert all(a.dtype == np.dtype("<f4") for a in arrays.values())


def test_save_is_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a", _model(3), "h")
    save_checkpoint(tmp_path / "b", _model(3), "h")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_hash_mismatch(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", _model(), "one")
    with pytest.raises(CheckpointError, match="--force"):
        load_checkpoint(tmp_path / "m.ckpt", _model(), "two")
    load_checkpoint(tmp_path / "m.ckpt", _model(), "two", force=True)


def test_architecture_mismatch(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", _model(), "h")
    with pytest.raises(CheckpointError, match="parameter names differ"):
        load_checkpoint(tmp_path / "m.ckpt", _model(use_cam=False), force=True)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path / "m.ckpt", _model(head_width=5), force=True)


def test_corrupt_files(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", _model(), "h")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "short").write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="payload"):
        read_checkpoint(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "magic")
