import struct
import zlib

import numpy as np
import pytest

from defect_yolo.checkpoint import CheckpointMeta, dumps, load_checkpoint, loads, save_checkpoint
from defect_yolo.data import AnnotationRecord, Sample
from defect_yolo.errors import CheckpointError
from defect_yolo.inference import evaluate
from defect_yolo.model import Detector, ModelConfig

META = CheckpointMeta(epoch=12, best_val_map=0.5, seed=3, class_names=("scratch", "crack"))


@pytest.fixture(scope="module")
def model():
    m = Detector(ModelConfig(input_size=64, num_classes=2, width=8, seed=5))
    rng = np.random.default_rng(0)
    for p in m.parameters().values():
        p.data[...] += rng.normal(scale=0.05, size=p.data.shape).astype(p.data.dtype)
    return m


def test_round_trip_is_bitwise(model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, META)
    back, meta = load_checkpoint(path)
    assert meta == META
    assert back.config == model.config
    a, b = model.parameters(), back.parameters()
    assert a.keys() == b.keys()
    for name in a:
        assert a[name].data.dtype == b[name].data.dtype
        assert a[name].data.tobytes() == b[name].data.tobytes(), name


def test_serialisation_is_deterministic(model):
    assert dumps(model, META) == dumps(model, META)
    assert dumps(*loads(dumps(model, META))) == dumps(model, META)


def test_evaluate_unchanged_after_reload(model, tmp_path):
    rng = np.random.default_rng(1)
    samples = [Sample(rng.uniform(size=(48, 64)), [AnnotationRecord(k % 2, 0.4, 0.5, 0.3, 0.4)]) for k in range(4)]
    before = evaluate(model, samples, list(META.class_names))
    save_checkpoint(model, tmp_path / "m.ckpt", META)
    after = evaluate(load_checkpoint(tmp_path / "m.ckpt")[0], samples, list(META.class_names))
    assert before.to_dict(digits=17) == after.to_dict(digits=17)


def test_bad_magic(model):
    raw = b"XXXX" + dumps(model)[4:]
    with pytest.raises(CheckpointError, match="bad magic"):
        loads(raw)


def test_version_mismatch(model):
    raw = bytearray(dumps(model))
    raw[4:8] = struct.pack("<I", 2)
    body = bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="version"):
        loads(body + struct.pack("<I", zlib.crc32(body)))


def test_truncation_is_rejected_everywhere(model):
    raw = dumps(model, META)
    for cut in sorted({5, 9, 20, len(raw) // 3, len(raw) // 2, len(raw) - 5, len(raw) - 1}):
        with pytest.raises(CheckpointError):
            loads(raw[:cut])


def test_flipped_byte_fails_checksum(model):
    raw = bytearray(dumps(model))
    raw[len(raw) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        loads(bytes(raw))


def test_trailing_garbage(model):
    with pytest.raises(CheckpointError, match="trailing"):
        loads(dumps(model) + b"\x00")


def test_failed_load_leaves_existing_file_and_returns_nothing(model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, META)
    good = path.read_bytes()
    path.write_bytes(good[:100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    assert not list(tmp_path.glob("*.tmp"))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")
